#pragma once

#include "mpt/adamw.hpp"
#include "mpt/bayes.hpp"
#include "mpt/errors.hpp"
#include "mpt/gradcheck.hpp"
#include "mpt/io/checkpoint.hpp"
#include "mpt/io/dataset_io.hpp"
#include "mpt/io/report.hpp"
#include "mpt/markov.hpp"
#include "mpt/model.hpp"
#include "mpt/ops.hpp"
#include "mpt/pretrain.hpp"
#include "mpt/rec/adaptor.hpp"
#include "mpt/rec/dataset.hpp"
#include "mpt/rec/evaluate.hpp"
#include "mpt/rec/finetune.hpp"
#include "mpt/rec/metrics.hpp"
#include "mpt/rec/synth.hpp"
#include "mpt/rng.hpp"
#include "mpt/tensor.hpp"
