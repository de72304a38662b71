#pragma once

#include "lpf/checkpoint.hpp"
#include "lpf/errors.hpp"
#include "lpf/harness.hpp"
#include "lpf/model.hpp"
#include "lpf/objectives.hpp"
#include "lpf/rng.hpp"
#include "lpf/synthbench.hpp"
#include "lpf/tensor.hpp"
#include "lpf/textio.hpp"
