#pragma once

// Umbrella header: the full library.

#include <idal/core.hpp>
#include <idal/volume.hpp>
#include <idal/nifti.hpp>
#include <idal/manifest.hpp>
#include <idal/case.hpp>
#include <idal/filters.hpp>
#include <idal/preprocess.hpp>
#include <idal/features.hpp>
#include <idal/forest.hpp>
#include <idal/naf.hpp>
#include <idal/dalsa.hpp>
#include <idal/similarity.hpp>
#include <idal/pipeline.hpp>
#include <idal/eval.hpp>
#include <idal/synth.hpp>
