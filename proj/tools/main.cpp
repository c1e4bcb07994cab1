#include <cstdio>
#include <exception>

#include "cli.hpp"
#include "commands.hpp"
#include "hamil/error.hpp"

// Exit codes: 0 success, 1 usage, 2 runtime.
int main(int argc, char** argv) {
  CLI::App app{"Learned-Hamiltonian engine", "hamil"};
  app.require_subcommand(1);
  hamil::cli::add_classifier(app);
  hamil::cli::add_surgery(app);
  hamil::cli::add_operators(app);
  hamil::cli::add_maze(app);
  hamil::cli::add_serve(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const hamil::cli::ExitStatus& s) {
    return s.code;
  } catch (const hamil::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
