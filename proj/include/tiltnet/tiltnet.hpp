// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tiltnet/error.hpp"
#include "tiltnet/tensor.hpp"
#include "tiltnet/loss.hpp"
#include "tiltnet/net.hpp"
#include "tiltnet/checkpoint.hpp"
#include "tiltnet/data.hpp"
#include "tiltnet/train.hpp"
#include "tiltnet/image.hpp"
#include "tiltnet/hmc.hpp"
#include "tiltnet/config.hpp"
#include "tiltnet/gradcheck.hpp"
