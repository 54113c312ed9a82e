#pragma once

/// Umbrella header for the whole library.

#include "crf/core.hpp"
#include "crf/grid.hpp"
#include "crf/spectral.hpp"
#include "crf/pointwise.hpp"
#include "crf/fields.hpp"
#include "crf/geometry.hpp"
#include "crf/background.hpp"
#include "crf/flow.hpp"
#include "crf/estimates.hpp"
#include "crf/einstein.hpp"
#include "crf/io.hpp"
#include "crf/cli.hpp"
