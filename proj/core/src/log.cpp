#include "clmae/log.hpp"

#include <iostream>

namespace clmae {

namespace {
LogSink& sink() {
  static LogSink s = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return s;
}
}  // namespace

LogSink set_warning_sink(LogSink s) {
  LogSink previous = std::move(sink());
  sink() = std::move(s);
  return previous;
}

void warn(std::string_view message) {
  if (sink()) sink()(message);
}

}  // namespace clmae
