#include <gtest/gtest.h>

#include "shardpipe/worker.hpp"

int main(int argc, char** argv) {
  if (auto code = shardpipe::maybe_run_worker(argc, argv)) return *code;
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
