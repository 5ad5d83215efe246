#pragma once

#include "ermc/attacks.hpp"
#include "ermc/curve.hpp"
#include "ermc/data_io.hpp"
#include "ermc/error.hpp"
#include "ermc/lp_geometry.hpp"
#include "ermc/mlp.hpp"
#include "ermc/parallel.hpp"
#include "ermc/random.hpp"
#include "ermc/robustness.hpp"
#include "ermc/tensor.hpp"
#include "ermc/training.hpp"
