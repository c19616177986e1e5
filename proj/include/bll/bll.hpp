#pragma once

#include "bll/activation_store.hpp"
#include "bll/aggregator.hpp"
#include "bll/features.hpp"
#include "bll/linear_models.hpp"
#include "bll/metrics.hpp"
#include "bll/model_bundle.hpp"
#include "bll/pipeline.hpp"
#include "bll/stats_cache.hpp"
#include "bll/suffstats.hpp"
#include "bll/synth.hpp"
