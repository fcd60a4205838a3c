// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ligru.hpp
 * @brief  Umbrella header.
 */
#pragma once

#include "analysis.hpp"
#include "cells.hpp"
#include "config.hpp"
#include "ctc.hpp"
#include "data.hpp"
#include "gradcheck.hpp"
#include "init.hpp"
#include "network.hpp"
#include "norm.hpp"
#include "numeric.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "sequence.hpp"
#include "trainer.hpp"
