#pragma once

#include <gtest/gtest.h>

#include "../random_mats.hpp"
