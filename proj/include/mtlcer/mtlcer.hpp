// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "checkpoint.hpp"
#include "config.hpp"
#include "convert.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "gradcheck.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "nn.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "synthetic.hpp"
#include "tensor.hpp"
#include "train.hpp"
