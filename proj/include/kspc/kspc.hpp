#pragma once

#include "kspc/classifier.hpp"
#include "kspc/core_model.hpp"
#include "kspc/encoder.hpp"
#include "kspc/error.hpp"
#include "kspc/io.hpp"
#include "kspc/shrinkage.hpp"
#include "kspc/stacked_prox.hpp"
#include "kspc/training.hpp"
