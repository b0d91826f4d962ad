#pragma once

// Umbrella header.

#include "cola/core.hpp"
#include "cola/operators.hpp"
#include "cola/compose.hpp"
#include "cola/krylov.hpp"
#include "cola/stochastic.hpp"
#include "cola/dispatch.hpp"
#include "cola/grad.hpp"
#include "cola/mmio.hpp"
#include "cola/problems.hpp"
