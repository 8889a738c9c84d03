#pragma once

#include "margingap/error.hpp"
#include "margingap/harness/config.hpp"
#include "margingap/harness/experiment.hpp"
#include "margingap/harness/pool.hpp"
#include "margingap/margin.hpp"
#include "margingap/model_io.hpp"
#include "margingap/netgraph.hpp"
#include "margingap/regress.hpp"
#include "margingap/signature.hpp"
#include "margingap/special.hpp"
#include "margingap/text.hpp"
#include "margingap/trainer.hpp"
