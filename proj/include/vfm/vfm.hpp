#pragma once

#include "vfm/data.hpp"
#include "vfm/errors.hpp"
#include "vfm/evaluation.hpp"
#include "vfm/inference.hpp"
#include "vfm/io.hpp"
#include "vfm/model.hpp"
#include "vfm/pipeline.hpp"
#include "vfm/predict.hpp"
#include "vfm/random.hpp"
#include "vfm/stats.hpp"
