#pragma once

#include "dereverb/lstm.hpp"
#include "dereverb/metrics.hpp"
#include "dereverb/pipeline.hpp"
#include "dereverb/postfilter.hpp"
#include "dereverb/psd.hpp"
#include "dereverb/rls_wpe.hpp"
#include "dereverb/scene.hpp"
#include "dereverb/signal.hpp"
#include "dereverb/stft.hpp"
#include "dereverb/types.hpp"
#include "dereverb/wav.hpp"
