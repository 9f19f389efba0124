#include "clmae/geometry.hpp"

#include "clmae/errors.hpp"

namespace clmae {

void ModelGeometry::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid geometry: " + what); };
  if (patch == 0 || image_h == 0 || image_w == 0 || channels == 0) fail("zero extent");
  if (image_h % patch != 0 || image_w % patch != 0) {
    fail(std::to_string(image_h) + "x" + std::to_string(image_w) + " not divisible by patch " +
         std::to_string(patch));
  }
  if (heads == 0 || embed_dim % heads != 0) fail("embed_dim not divisible by heads");
  if (decoder_heads == 0 || decoder_dim % decoder_heads != 0) {
    fail("decoder_dim not divisible by decoder_heads");
  }
  if (embed_dim % 4 != 0 || decoder_dim % 4 != 0) fail("widths must be multiples of 4");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
}

}  // namespace clmae
