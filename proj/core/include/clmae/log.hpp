#pragma once

#include <functional>
#include <string_view>

namespace clmae {

using LogSink = std::function<void(std::string_view)>;

/// Routes warnings; the default sink writes "warning: <msg>" to stderr.
/// Passing an empty function silences warnings. Returns the previous sink.
LogSink set_warning_sink(LogSink sink);
void warn(std::string_view message);

}  // namespace clmae
