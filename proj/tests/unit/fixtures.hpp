#pragma once

#include <vector>

#include "hamil/maze_agent.hpp"

namespace hamil::test {

struct TrainedAgent {
  MazeAgent agent;
  Stage1Report s1;
  Stage2Report s2;
  Stage3Report s3;
};

/// Default-config agent through all three stages; trained once per process.
const TrainedAgent& trained();
/// 100 mazes from seeds disjoint from every training corpus.
const std::vector<MazeWorld>& held_out_mazes();

}  // namespace hamil::test
