#include "fixtures.hpp"

namespace hamil::test {

const TrainedAgent& trained() {
  static const TrainedAgent t = [] {
    MazeAgent a{MazeAgentConfig{}};
    const auto& c = a.config();
    Stage1Report s1 = train_stage1_actions(a);
    Stage2Report s2 = train_stage2_perception(a, maze_corpus(c.corpus_seed, c.perception_mazes, c.maze));
    Stage3Report s3 = train_stage3_alignment(a, maze_corpus(c.corpus_seed + 100000, c.habit_mazes, c.maze));
    return TrainedAgent{a, s1, s2, s3};
  }();
  return t;
}

const std::vector<MazeWorld>& held_out_mazes() {
  static const std::vector<MazeWorld> w = maze_corpus(500000, 100, MazeSpec{});
  return w;
}

}  // namespace hamil::test
