#pragma once

#include "affectnet/config.hpp"
#include "affectnet/container.hpp"
#include "affectnet/data.hpp"
#include "affectnet/error.hpp"
#include "affectnet/evaluate.hpp"
#include "affectnet/grad_check.hpp"
#include "affectnet/gradcheck_suite.hpp"
#include "affectnet/model.hpp"
#include "affectnet/nn.hpp"
#include "affectnet/objectives.hpp"
#include "affectnet/optim.hpp"
#include "affectnet/tensor.hpp"
#include "affectnet/train.hpp"
