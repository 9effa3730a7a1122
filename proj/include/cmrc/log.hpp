#pragma once

#include <cstddef>
#include <string_view>

namespace cmrc {

// Warnings go to stderr unless silenced; the running count is kept either way.
void warn(std::string_view message);
std::size_t warning_count();
void set_warnings_silenced(bool silenced);

}  // namespace cmrc
