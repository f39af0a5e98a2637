#pragma once

// Umbrella header for the whole library.

#include "semstg/checkpoint.hpp"
#include "semstg/data.hpp"
#include "semstg/errors.hpp"
#include "semstg/gradcheck.hpp"
#include "semstg/gradcheck_suite.hpp"
#include "semstg/graph.hpp"
#include "semstg/metrics.hpp"
#include "semstg/model.hpp"
#include "semstg/plot.hpp"
#include "semstg/session.hpp"
#include "semstg/synth.hpp"
#include "semstg/tensor.hpp"
#include "semstg/train.hpp"
