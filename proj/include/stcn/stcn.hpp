#pragma once

#include "stcn/autodiff.hpp"
#include "stcn/config.hpp"
#include "stcn/errors.hpp"
#include "stcn/eval.hpp"
#include "stcn/latent.hpp"
#include "stcn/model.hpp"
#include "stcn/observation.hpp"
#include "stcn/seqdata.hpp"
#include "stcn/tcn.hpp"
#include "stcn/training.hpp"
