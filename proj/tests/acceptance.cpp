// Acceptance gate: runs every primary criterion at its stated tolerance and prints
// one PASS/FAIL line per criterion, followed by the measured quantities.
//
//   acceptance [--threads N] [--seed S] [--only name,name]
//
// LORENTZ_CLI names the CLI binary used for the artifact determinism reruns.

#include "lorentz/suite.hpp"

#include <cstdlib>
#include <cstring>
#include <iostream>
#include <set>
#include <sstream>

int main(int argc, char** argv) {
  lorentz::SuiteContext ctx;
  std::set<std::string> only;
  for (int i = 1; i + 1 < argc; i += 2) {
    if (!std::strcmp(argv[i], "--threads")) ctx.threads = static_cast<unsigned>(std::stoul(argv[i + 1]));
    else if (!std::strcmp(argv[i], "--seed")) ctx.seed = std::stoull(argv[i + 1]);
    else if (!std::strcmp(argv[i], "--only")) {
      std::stringstream ss(argv[i + 1]);
      for (std::string s; std::getline(ss, s, ',');) only.insert(s);
    } else {
      std::cerr << "unknown argument " << argv[i] << '\n';
      return 2;
    }
  }
  if (const char* cli = std::getenv("LORENTZ_CLI")) ctx.cli = cli;
  ctx.work_dir = std::filesystem::temp_directory_path() / "lorentz_acceptance";

  int failed = 0, n = 0;
  double total = 0.0;
  for (const auto& c : lorentz::all_checks()) {
    if (!only.empty() && !only.count(c.name)) continue;
    const auto r = lorentz::run_check(c.name, ctx);
    ++n;
    total += r.seconds;
    failed += r.pass ? 0 : 1;
    char head[160];
    std::snprintf(head, sizeof head, "%s %-24s %-46s %7.1fs", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                  c.criterion.c_str(), r.seconds);
    std::cout << head << '\n';
    for (const auto& d : r.details) std::cout << "       " << d << '\n';
    std::cout.flush();
  }
  std::filesystem::remove_all(ctx.work_dir);
  std::cout << (failed == 0 ? "ALL PASS" : "FAILURES") << ": " << n - failed << " of " << n << " criteria in "
            << static_cast<int>(total) << "s\n";
  return failed == 0 ? 0 : 1;
}
