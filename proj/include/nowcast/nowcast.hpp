#pragma once

#include "nowcast/baselines.hpp"
#include "nowcast/checkpoint.hpp"
#include "nowcast/error.hpp"
#include "nowcast/eval.hpp"
#include "nowcast/optim.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/prediction.hpp"
#include "nowcast/provenance.hpp"
#include "nowcast/raster.hpp"
#include "nowcast/synthgen.hpp"
#include "nowcast/tensor.hpp"
#include "nowcast/unet.hpp"
#include "nowcast/workflow.hpp"
