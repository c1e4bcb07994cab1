#pragma once

#include "CLI11.hpp"

namespace hamil::cli {

void add_classifier(CLI::App& root);
void add_surgery(CLI::App& root);
void add_operators(CLI::App& root);
void add_maze(CLI::App& root);
void add_serve(CLI::App& root);

}  // namespace hamil::cli
