#pragma once

#include <cstdint>
#include <vector>

#include "m3f/tensor.hpp"

namespace m3f {

/// One training example: a multivariate time series [N x B], a patch
/// [CH x P x P], the class label and the field-object identifier.
struct Sample {
    Tensor ts;
    Tensor patch;
    int label = 0;
    uint32_t object_id = 0;
};

}  // namespace m3f
