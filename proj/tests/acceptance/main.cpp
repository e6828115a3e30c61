#include <chrono>
#include <cstdlib>
#include <iostream>
#include <set>

#include "harness.hpp"

namespace acceptance {
void register_core(std::vector<Criterion>& out);
void register_interp(std::vector<Criterion>& out);
void register_atlas(std::vector<Criterion>& out);
}  // namespace acceptance

namespace {

void usage(const char* argv0) {
  std::cout << "usage: " << argv0 << " [--only N[,N...]] [--work DIR] [--fresh] [--list]\n"
            << "  --only   run a subset of criteria by number\n"
            << "  --work   stage cache directory (default: ./acceptance-work)\n"
            << "  --fresh  delete the stage cache first\n"
            << "  --list   print criteria and exit\n";
}

}  // namespace

int main(int argc, char** argv) {
  using acceptance::Criterion;
  using acceptance::Ctx;
  using acceptance::Result;

  std::filesystem::path work = "acceptance-work";
  std::set<int> only;
  bool fresh = false, list = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::atoi(tok.c_str()));
    } else if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--fresh") {
      fresh = true;
    } else if (a == "--list") {
      list = true;
    } else {
      usage(argv[0]);
      return 2;
    }
  }

  std::vector<Criterion> criteria;
  acceptance::register_core(criteria);
  acceptance::register_interp(criteria);
  acceptance::register_atlas(criteria);
  std::sort(criteria.begin(), criteria.end(),
            [](const Criterion& a, const Criterion& b) { return a.id < b.id; });

  if (list) {
    for (const auto& c : criteria)
      std::cout << "  " << c.id << ": " << c.name << " (budget " << c.budget_seconds << "s)\n";
    return 0;
  }

  if (fresh) std::filesystem::remove_all(work);
  std::filesystem::create_directories(work);
  Ctx ctx;
  ctx.work = work;
  ctx.log = &std::cerr;

  int failures = 0;
  int ran = 0;
  const auto suite_start = std::chrono::steady_clock::now();
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++ran;
    std::cerr << "[criterion " << c.id << "] " << c.name << "\n" << std::flush;
    const auto t0 = std::chrono::steady_clock::now();
    Result r;
    try {
      r = c.fn(ctx);
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs <= c.budget_seconds;
    const bool ok = r.pass && in_budget;
    failures += ok ? 0 : 1;
    std::cout << "[" << (c.id < 10 ? " " : "") << c.id << "/12] " << (ok ? "PASS" : "FAIL")
              << " " << c.name << ": " << r.detail;
    if (!in_budget) std::cout << " [over budget " << c.budget_seconds << "s]";
    std::cout << " (" << acceptance::fmt(secs, 1) << "s)\n" << std::flush;
  }
  const double total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - suite_start).count();

  if (ran == 0) {
    std::cout << "no criteria selected\n";
    return 2;
  }
  std::cout << (failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL") << " (" << ran - failures
            << "/" << ran << " criteria, " << acceptance::fmt(total, 1) << "s)\n";
  return failures == 0 ? 0 : 1;
}
