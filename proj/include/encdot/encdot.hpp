#pragma once

#include "encdot/error.hpp"
#include "encdot/numerics/tensor.hpp"
#include "encdot/numerics/ops.hpp"
#include "encdot/numerics/parameters.hpp"
#include "encdot/numerics/adam.hpp"
#include "encdot/confnet.hpp"
#include "encdot/encoder.hpp"
#include "encdot/checkpoint.hpp"
#include "encdot/detector.hpp"
#include "encdot/metrics.hpp"
#include "encdot/trainer.hpp"
#include "encdot/synth.hpp"
