#pragma once

#include "stf/errors.hpp"
#include "stf/rng.hpp"
#include "stf/tensor.hpp"
#include "stf/ops.hpp"
#include "stf/grad_check.hpp"
#include "stf/serialize.hpp"
#include "stf/topology.hpp"
#include "stf/config.hpp"
#include "stf/layers.hpp"
#include "stf/streams.hpp"
#include "stf/network.hpp"
#include "stf/data.hpp"
#include "stf/harness.hpp"
#include "stf/checks.hpp"
#include "stf/runtime.hpp"
