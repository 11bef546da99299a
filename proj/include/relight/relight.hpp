#pragma once

#include "relight/core.hpp"
#include "relight/image.hpp"
#include "relight/envmap.hpp"
#include "relight/nn.hpp"
#include "relight/conditioning.hpp"
#include "relight/field.hpp"
#include "relight/renderer.hpp"
#include "relight/synthdata.hpp"
#include "relight/metrics.hpp"
#include "relight/training.hpp"
#include "relight/service.hpp"
