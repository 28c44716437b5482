#pragma once

#include "dptab/accountant.hpp"
#include "dptab/autodiff.hpp"
#include "dptab/checkpoint.hpp"
#include "dptab/config.hpp"
#include "dptab/config_file.hpp"
#include "dptab/data.hpp"
#include "dptab/dp_optimizer.hpp"
#include "dptab/error.hpp"
#include "dptab/experiment.hpp"
#include "dptab/model.hpp"
#include "dptab/peft.hpp"
#include "dptab/rng.hpp"
#include "dptab/tensor.hpp"
