#pragma once

#include "nirsfb/classifier.hpp"
#include "nirsfb/config.hpp"
#include "nirsfb/dsp.hpp"
#include "nirsfb/error.hpp"
#include "nirsfb/features.hpp"
#include "nirsfb/hemodynamics.hpp"
#include "nirsfb/jsonl.hpp"
#include "nirsfb/nodes.hpp"
#include "nirsfb/session.hpp"
#include "nirsfb/subject_sim.hpp"
#include "nirsfb/transport.hpp"
#include "nirsfb/wire.hpp"
