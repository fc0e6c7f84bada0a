// Umbrella header.
#ifndef COLLUSION_COLLUSION_HPP
#define COLLUSION_COLLUSION_HPP

#include "collusion/agents.hpp"
#include "collusion/analysis.hpp"
#include "collusion/core.hpp"
#include "collusion/env.hpp"
#include "collusion/game.hpp"
#include "collusion/llm.hpp"
#include "collusion/llm_http.hpp"
#include "collusion/metagame.hpp"
#include "collusion/pipeline.hpp"
#include "collusion/pretrain.hpp"
#include "collusion/values.hpp"

#endif  // COLLUSION_COLLUSION_HPP
