#pragma once

namespace ssgan {

const char* version();

}  // namespace ssgan
