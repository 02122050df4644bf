// Writes a deterministic synthetic English-like corpus, the training
// stand-in used by the tests and the examples in the README.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "gpn/textgen.hpp"

int main(int argc, char** argv) {
  CLI::App app{"gpn-maketext: deterministic synthetic text corpus"};
  std::string out = "corpus.txt";
  std::size_t megabytes = 2;
  std::uint64_t seed = 7;
  app.add_option("--out", out, "output path")->capture_default_str();
  app.add_option("--mb", megabytes, "size in MiB")->capture_default_str();
  app.add_option("--seed", seed, "generator seed")->capture_default_str();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? 2 : 0;
  }
  const std::string text = gpn::textgen::generate(megabytes << 20, seed);
  std::ofstream os(out, std::ios::binary);
  if (!os) {
    std::cerr << "cannot open " << out << "\n";
    return 3;
  }
  os << text;
  std::cout << "wrote " << text.size() << " bytes to " << out << "\n";
  return 0;
}
