#pragma once

#include "specpl/errors.hpp"
#include "specpl/latent.hpp"
#include "specpl/teacher.hpp"
#include "specpl/nn.hpp"
#include "specpl/spectral_proxy.hpp"
#include "specpl/semantic_bank.hpp"
#include "specpl/text_refinement.hpp"
#include "specpl/granule_film.hpp"
#include "specpl/objectives.hpp"
#include "specpl/trainer.hpp"
#include "specpl/spectral_diag.hpp"
#include "specpl/config.hpp"
#include "specpl/checkpoint.hpp"
#include "specpl/eval.hpp"
