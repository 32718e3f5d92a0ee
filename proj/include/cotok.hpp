#pragma once

#include "cotok/tensor.hpp"
#include "cotok/autograd.hpp"
#include "cotok/config.hpp"
#include "cotok/ingest.hpp"
#include "cotok/params.hpp"
#include "cotok/backbone.hpp"
#include "cotok/cotokenizer.hpp"
#include "cotok/transformer.hpp"
#include "cotok/fusion.hpp"
#include "cotok/decoder.hpp"
#include "cotok/model.hpp"
#include "cotok/training.hpp"
#include "cotok/flops.hpp"
#include "cotok/metrics.hpp"
#include "cotok/export.hpp"
