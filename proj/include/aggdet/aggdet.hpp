#pragma once

#include "aggdet/ablation.hpp"
#include "aggdet/calibration.hpp"
#include "aggdet/catalog.hpp"
#include "aggdet/errors.hpp"
#include "aggdet/evaluation.hpp"
#include "aggdet/geometry.hpp"
#include "aggdet/io.hpp"
#include "aggdet/latency.hpp"
#include "aggdet/linalg.hpp"
#include "aggdet/pipeline.hpp"
#include "aggdet/proposal_stage.hpp"
#include "aggdet/prototypes.hpp"
#include "aggdet/scoring.hpp"
#include "aggdet/synthetic.hpp"
