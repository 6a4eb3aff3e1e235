#include "lorentz/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>

int main(int argc, char** argv) {
  CLI::App app{"Lorentz gas in the Boltzmann-Grad limit: micro simulation, kernels, limiting process, propagator"};
  app.require_subcommand(1);
  lorentz::cli::Options opt;
  std::uint64_t seed = 0;
  std::vector<CLI::Option*> seed_opts;
  for (const auto& name : lorentz::cli::commands()) {
    auto* sub = app.add_subcommand(name);
    if (name == "manifest-check") {
      sub->add_option("dir", opt.out, "run directory")->required();
      continue;
    }
    sub->add_option("--config", opt.config, "configuration file")->required();
    seed_opts.push_back(sub->add_option("--seed", seed, "master seed (overrides `seed` in the configuration)"));
    sub->add_option("--threads", opt.threads, "worker threads; results do not depend on it");
    sub->add_option("--out", opt.out, "run directory")->required();
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const auto* sub = app.get_subcommands().front();
  for (const auto* o : seed_opts)
    if (o->count() > 0) opt.seed = seed;
  std::string self;
  std::error_code ec;
  const auto exe = std::filesystem::read_symlink("/proc/self/exe", ec);
  self = ec ? std::string(argv[0]) : exe.string();
  return lorentz::cli::run(sub->get_name(), opt, std::cout, std::cerr, self);
}
