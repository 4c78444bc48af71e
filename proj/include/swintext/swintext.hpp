#pragma once

#include "swintext/augment.hpp"
#include "swintext/checkpoint.hpp"
#include "swintext/config.hpp"
#include "swintext/data.hpp"
#include "swintext/decoder.hpp"
#include "swintext/errors.hpp"
#include "swintext/loss.hpp"
#include "swintext/model.hpp"
#include "swintext/nn.hpp"
#include "swintext/ops.hpp"
#include "swintext/optim.hpp"
#include "swintext/swin.hpp"
#include "swintext/tensor.hpp"
#include "swintext/text.hpp"
#include "swintext/train.hpp"
#include "swintext/verify.hpp"
