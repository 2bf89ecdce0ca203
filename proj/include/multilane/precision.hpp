#pragma once

// Library symbols live in an inline namespace named after the scalar type, so
// the float and double builds can be linked into one binary.
#ifdef MULTILANE_REAL_DOUBLE
#define MULTILANE_PRECISION_NS f64
#else
#define MULTILANE_PRECISION_NS f32
#endif
