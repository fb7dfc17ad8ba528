#pragma once

#include "epee/autodiff.hpp"
#include "epee/checkpoint.hpp"
#include "epee/data.hpp"
#include "epee/entropy.hpp"
#include "epee/errors.hpp"
#include "epee/evaluation.hpp"
#include "epee/exit_policy.hpp"
#include "epee/grad_check.hpp"
#include "epee/model.hpp"
#include "epee/tensor.hpp"
#include "epee/trace.hpp"
#include "epee/train.hpp"
#include "epee/verify.hpp"
