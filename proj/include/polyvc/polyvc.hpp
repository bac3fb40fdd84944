#pragma once

// Umbrella header: the whole toolkit in dependency order.

#include "polyvc/common.hpp"
#include "polyvc/matrix.hpp"
#include "polyvc/rng.hpp"
#include "polyvc/configfile.hpp"
#include "polyvc/audio.hpp"
#include "polyvc/dsp.hpp"
#include "polyvc/features.hpp"
#include "polyvc/kmeans.hpp"
#include "polyvc/regulator.hpp"
#include "polyvc/acoustic.hpp"
#include "polyvc/manifest.hpp"
#include "polyvc/checkpoint.hpp"
#include "polyvc/training.hpp"
#include "polyvc/vocoder.hpp"
#include "polyvc/eval.hpp"
#include "polyvc/pipeline.hpp"
#include "polyvc/cli.hpp"
