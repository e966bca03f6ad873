#pragma once

// Umbrella header.

#include "trajground/cli.hpp"
#include "trajground/config.hpp"
#include "trajground/dataset.hpp"
#include "trajground/error.hpp"
#include "trajground/evalcorrect.hpp"
#include "trajground/loss.hpp"
#include "trajground/model.hpp"
#include "trajground/navgraph.hpp"
#include "trajground/numerics/checkpoint.hpp"
#include "trajground/numerics/grad_check.hpp"
#include "trajground/numerics/graph.hpp"
#include "trajground/numerics/layers.hpp"
#include "trajground/pipeline.hpp"
#include "trajground/recipe.hpp"
#include "trajground/render.hpp"
#include "trajground/rng.hpp"
#include "trajground/synthworld.hpp"
#include "trajground/trainer.hpp"
