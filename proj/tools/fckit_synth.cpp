// fckit_synth: writes a learnable synthetic fixture (images + manifest.csv).

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "fckit/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"write a synthetic labeled image set"};
  std::string out;
  fckit::SyntheticConfig cfg;
  app.add_option("out_dir", out, "output directory")->required();
  app.add_option("-n,--samples", cfg.samples, "number of frames")->check(CLI::PositiveNumber);
  app.add_option("--classes", cfg.classes, "number of expression classes")->check(CLI::Range(2, 1000));
  app.add_option("--frames-per-video", cfg.frames_per_video, "consecutive frames per video")->check(CLI::PositiveNumber);
  app.add_option("--noise", cfg.noise, "pixel jitter amplitude");
  app.add_option("--seed", cfg.seed, "random seed");
  app.add_option("--ext", cfg.extension, "image format")->check(CLI::IsMember({".f32", ".ppm"}));
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  try {
    fckit::write_synthetic(fckit::make_synthetic(cfg), out);
    std::printf("wrote %zu samples to %s\n", cfg.samples, out.c_str());
  } catch (const fckit::Error& e) {
    std::cerr << "fckit_synth: " << e.what() << "\n";
    return e.category() == fckit::ErrorCategory::io ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "fckit_synth: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
