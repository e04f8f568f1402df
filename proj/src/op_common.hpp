#pragma once

#include "icaps/tensor.hpp"

namespace icaps::detail {

std::shared_ptr<Node> make_node(Shape shape, std::vector<float> value);

Tensor make_op_result(const char* op, Shape shape, std::vector<float> value,
                      std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace icaps::detail
