#pragma once

#include "skd/checkpoint.hpp"
#include "skd/dataset.hpp"
#include "skd/distiller.hpp"
#include "skd/error.hpp"
#include "skd/evaluate.hpp"
#include "skd/maxflow.hpp"
#include "skd/metric.hpp"
#include "skd/mincut.hpp"
#include "skd/selgraph.hpp"
#include "skd/student.hpp"
