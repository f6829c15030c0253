#pragma once

#include "shardpipe/worker.hpp"

namespace shardpipe {

// Called once from the TaskRegistry constructor. Explicit registration keeps
// the linker from dropping task tables that live in the static library.
void register_builtin_tasks(TaskRegistry& registry);
void register_estimator_tasks(TaskRegistry& registry);

}  // namespace shardpipe
