#pragma once

#include "finerec/app.hpp"
#include "finerec/checkpoint.hpp"
#include "finerec/corpus.hpp"
#include "finerec/encoder.hpp"
#include "finerec/error.hpp"
#include "finerec/evaluation.hpp"
#include "finerec/extraction.hpp"
#include "finerec/graphs.hpp"
#include "finerec/http_endpoint.hpp"
#include "finerec/model.hpp"
#include "finerec/rng.hpp"
#include "finerec/synth.hpp"
#include "finerec/text.hpp"
#include "finerec/training.hpp"
