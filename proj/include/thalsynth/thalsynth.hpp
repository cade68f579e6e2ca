#pragma once

#include "thalsynth/errors.hpp"
#include "thalsynth/volgrid.hpp"
#include "thalsynth/dti.hpp"
#include "thalsynth/synthgen.hpp"
#include "thalsynth/supervise.hpp"
#include "thalsynth/nifti.hpp"
#include "thalsynth/pipeline.hpp"
