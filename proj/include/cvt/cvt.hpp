#pragma once

#include "cvt/autograd.hpp"
#include "cvt/checkpoint.hpp"
#include "cvt/data_stream.hpp"
#include "cvt/errors.hpp"
#include "cvt/evaluation.hpp"
#include "cvt/experiment.hpp"
#include "cvt/external_attention.hpp"
#include "cvt/image.hpp"
#include "cvt/image_folder.hpp"
#include "cvt/losses.hpp"
#include "cvt/model.hpp"
#include "cvt/nn.hpp"
#include "cvt/replay_memory.hpp"
#include "cvt/trainer.hpp"
