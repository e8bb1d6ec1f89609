#pragma once

// Umbrella header.

#include "kemm/autodiff.hpp"
#include "kemm/container.hpp"
#include "kemm/data.hpp"
#include "kemm/encoders.hpp"
#include "kemm/fusion.hpp"
#include "kemm/kecm.hpp"
#include "kemm/knowledge/backend.hpp"
#include "kemm/knowledge/encode.hpp"
#include "kemm/knowledge/fixtures.hpp"
#include "kemm/knowledge/prompt.hpp"
#include "kemm/knowledge/refine.hpp"
#include "kemm/layers.hpp"
#include "kemm/model.hpp"
#include "kemm/random.hpp"
#include "kemm/survival.hpp"
#include "kemm/synthetic.hpp"
#include "kemm/pipeline.hpp"
#include "kemm/train.hpp"
