#include "core/version.hpp"

namespace ssgan {

const char* version() { return "0.1.0"; }

}  // namespace ssgan
