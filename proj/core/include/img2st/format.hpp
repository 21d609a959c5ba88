#pragma once

#include <cstdio>
#include <string>

namespace img2st {

// canonical number formatting shared by every text writer, so identical
// values always serialize to identical bytes
inline std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace img2st
