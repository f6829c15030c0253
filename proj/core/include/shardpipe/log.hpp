#pragma once

namespace shardpipe {

// Configures the stderr logger from SHARDPIPE_LOG (trace, debug, info, warn,
// error, off; default warn). Safe to call more than once.
void init_logging();

}  // namespace shardpipe
