#pragma once

#include "funet/config.hpp"
#include "funet/data.hpp"
#include "funet/errors.hpp"
#include "funet/label_map.hpp"
#include "funet/loss.hpp"
#include "funet/metrics.hpp"
#include "funet/network.hpp"
#include "funet/ops.hpp"
#include "funet/tensor.hpp"
#include "funet/training.hpp"
