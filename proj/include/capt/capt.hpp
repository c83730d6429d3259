#pragma once

#include "capt/analysis.hpp"
#include "capt/backend.hpp"
#include "capt/config.hpp"
#include "capt/constraint.hpp"
#include "capt/ensemble.hpp"
#include "capt/errors.hpp"
#include "capt/eval.hpp"
#include "capt/method.hpp"
#include "capt/metrics.hpp"
#include "capt/remote_backend.hpp"
#include "capt/text.hpp"
#include "capt/tokenizer.hpp"
#include "capt/toy_model.hpp"
#include "capt/trace_io.hpp"
#include "capt/vocab_map.hpp"
#include "capt/wire.hpp"
#include "capt/wire_server.hpp"
