// Runs the built fckit binary end to end.

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "fckit/datapipe.hpp"
#include "fckit/model.hpp"
#include "fckit/synthetic.hpp"
#include "fckit/weights_io.hpp"
#include "support.hpp"

using namespace fckit;
using fckit::test::TempDir;

namespace {

struct Run {
  int code = -1;
  std::string out;  // stdout followed by stderr
};

Run fckit_run(const std::string& args) {
  const std::string cmd = std::string(FCKIT_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Every weight zero: outputs are exactly arousal 0, valence 0 and a uniform distribution.
std::string zero_model(const TempDir& dir) {
  auto m = build_facechannel(kDefaultClasses, 1);
  for (auto& p : m.params()) p.value.fill(0.0f);
  const auto path = dir.file("zero.fcw");
  save_weights(m, path);
  return path;
}

std::string write_synth(const TempDir& dir, std::size_t n, const std::string& sub = "synth") {
  SyntheticConfig cfg;
  cfg.samples = n;
  const auto out = dir.file(sub);
  write_synthetic(make_synthetic(cfg), out);
  return out + "/manifest.csv";
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(fckit_run("").code, 1);
  EXPECT_EQ(fckit_run("frobnicate").code, 1);
  EXPECT_EQ(fckit_run("prep").code, 1);
  EXPECT_EQ(fckit_run("prep x.csv --balance sideways").code, 1);
  EXPECT_EQ(fckit_run("--help").code, 0);
  EXPECT_EQ(fckit_run("train --help").code, 0);
}

TEST(Cli, PrepFiltersFixture) {
  TempDir dir("cli_prep");
  spit(dir.file("m.csv"),
       "path,video,frame,valence,arousal,expression\n"
       "a.f32,v,0,1.5,0,1\n"      // valence out of range
       "b.f32,v,1,-0.3,0.2,4\n"   // happy, negative valence
       "c.f32,v,2,0.3,0.2,5\n"    // sad, positive valence
       "d.f32,v,3,0.8,0.9,0\n"    // neutral, both magnitudes large
       "e.f32,v,4,0.8,0.1,0\n"    // neutral, arousal small: kept
       "f.f32,v,5,0.5,-0.5,4\n");  // kept
  const auto r = fckit_run("prep " + dir.file("m.csv") + " --filter -o " + dir.file("out"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("kept     2"), std::string::npos) << r.out;
  const auto kept = parse_manifest(dir.file("out/manifest.csv"));
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(std::filesystem::path(kept[0].path).filename(), "e.f32");
  EXPECT_EQ(std::filesystem::path(kept[1].path).filename(), "f.f32");
  const auto report = slurp(dir.file("out/filter_report.txt"));
  for (const char* rule : {"invalid-range    1", "happy-negative   1", "sad-positive     1", "neutral-extreme  1"})
    EXPECT_NE(report.find(rule), std::string::npos) << rule << "\n" << report;

  // or-rule: the arousal-small neutral row now goes too
  const auto r2 = fckit_run("prep " + dir.file("m.csv") + " --filter --neutral-rule or -o " + dir.file("out2"));
  ASSERT_EQ(r2.code, 0) << r2.out;
  EXPECT_EQ(parse_manifest(dir.file("out2/manifest.csv")).size(), 1u);
}

TEST(Cli, PrepBalanceIsSeedDeterministic) {
  TempDir dir("cli_bal");
  std::string text = "path,video,frame,valence,arousal,expression\n";
  for (int i = 0; i < 9; ++i) text += "i" + std::to_string(i) + ".f32,v,"  + std::to_string(i) + ",0.1,0.1," + (i < 6 ? "1" : "2") + "\n";
  spit(dir.file("m.csv"), text);
  const auto base = "prep " + dir.file("m.csv") + " --balance cat --classes 3 --filter";
  // class 0 is empty, so categorical balancing refuses
  EXPECT_EQ(fckit_run(base + " -o " + dir.file("a")).code, 1);

  std::string text3 = text + "n.f32,w,0,0.1,0.1,0\n";
  spit(dir.file("m3.csv"), text3);
  const auto base3 = "prep " + dir.file("m3.csv") + " --balance cat --classes 3";
  ASSERT_EQ(fckit_run(base3 + " -o " + dir.file("a")).code, 0);
  ASSERT_EQ(fckit_run(base3 + " -o " + dir.file("b")).code, 0);
  ASSERT_EQ(fckit_run(base3 + " --seed 7 -o " + dir.file("c")).code, 0);
  const auto a = slurp(dir.file("a/manifest.csv"));
  EXPECT_EQ(a, slurp(dir.file("b/manifest.csv")));
  EXPECT_NE(a, slurp(dir.file("c/manifest.csv")));
  EXPECT_EQ(parse_manifest(dir.file("a/manifest.csv")).size(), 18u);
}

TEST(Cli, PrepStatsOnEmptyManifest) {
  TempDir dir("cli_empty");
  spit(dir.file("m.csv"), "path,video,frame,valence,arousal,expression\n");
  const auto r = fckit_run("prep " + dir.file("m.csv") + " --stats -o " + dir.file("out"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("samples 0"), std::string::npos) << r.out;
  const auto counts = slurp(dir.file("out/class_counts.csv"));
  EXPECT_EQ(counts.substr(0, counts.find('\n')), "label,count");
  EXPECT_EQ(count_lines(counts), 1u + kDefaultClasses);
  EXPECT_EQ(count_lines(slurp(dir.file("out/histogram.csv"))), 1u + kValenceBins);
}

TEST(Cli, PrepRefusesToOverwriteInput) {
  TempDir dir("cli_guard");
  const std::string text = "path,video,frame,valence,arousal,expression\na.f32,v,0,1.5,0,1\n";
  spit(dir.file("manifest.csv"), text);
  const auto r = fckit_run("prep " + dir.file("manifest.csv") + " --filter -o " + dir.path().string());
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_EQ(slurp(dir.file("manifest.csv")), text);
}

TEST(Cli, ErrorCategoriesMapToExitCodes) {
  TempDir dir("cli_codes");
  EXPECT_EQ(fckit_run("prep " + dir.file("missing.csv")).code, 2);
  spit(dir.file("bad.csv"), "path,video,frame,valence,arousal,expression\na.f32,v,zero,0,0,1\n");
  EXPECT_EQ(fckit_run("prep " + dir.file("bad.csv")).code, 1);
  spit(dir.file("nocol.csv"), "path,video,valence\n");
  EXPECT_EQ(fckit_run("prep " + dir.file("nocol.csv")).code, 1);

  // manifest rows whose images are missing
  const auto weights = zero_model(dir);
  spit(dir.file("m.csv"), "path,video,frame,valence,arousal,expression\nnope.f32,v,0,0,0,1\n");
  EXPECT_EQ(fckit_run("eval -w " + weights + " -m " + dir.file("m.csv")).code, 2);
}

TEST(Cli, EvalOnConstantPredictor) {
  TempDir dir("cli_eval");
  const auto manifest = write_synth(dir, 7);
  auto samples = parse_manifest(manifest);
  // gold classes 0,0,0,1,1,4,4 with varied labels
  const std::array<int, 7> gold{0, 0, 0, 1, 1, 4, 4};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].expression = gold[i];
    samples[i].video = "v" + std::to_string(i);
  }
  write_manifest(manifest, samples);
  const auto weights = zero_model(dir);
  const auto r = fckit_run("eval -w " + weights + " -m " + manifest + " --metrics-out " + dir.file("metrics.csv") +
                           " --confusion-out " + dir.file("confusion.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  // every prediction is class 0: F1 is 0.6 for class 0 and 0 for classes 1 and 4
  EXPECT_EQ(r.out, "Arousal,Valence,F1-Score,Accuracy\n0.0000,0.0000,0.2000,0.4286\n");
  const auto metrics = slurp(dir.file("metrics.csv"));
  EXPECT_NE(metrics.find("n,7"), std::string::npos) << metrics;
  const auto confusion = slurp(dir.file("confusion.csv"));
  EXPECT_EQ(count_lines(confusion), 1u + kDefaultClasses);

  const auto w = fckit_run("eval -w " + weights + " -m " + manifest + " --f1 weighted");
  ASSERT_EQ(w.code, 0) << w.out;
  EXPECT_NE(w.out.find(",0.2571,"), std::string::npos) << w.out;  // 3 * 0.6 / 7
}

TEST(Cli, PredictOnZeroModel) {
  TempDir dir("cli_predict");
  write_synth(dir, 2);
  const auto weights = zero_model(dir);
  const auto r = fckit_run("predict -w " + weights + " " + dir.file("synth/synth0_0.f32") + " " +
                           dir.file("synth/synth0_1.f32"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out, "arousal,valence,class,confidence\n0.000000,0.000000,0,0.142857\n0.000000,0.000000,0,0.142857\n");
  EXPECT_EQ(fckit_run("predict -w " + weights + " " + dir.file("synth/absent.f32")).code, 2);
}

TEST(Cli, InspectReportsParameterCounts) {
  TempDir dir("cli_inspect");
  const auto r = fckit_run("inspect");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("total parameters 2,235,537"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("conv layers 10, pool layers 4"), std::string::npos) << r.out;

  const auto weights = zero_model(dir);
  const auto w = fckit_run("inspect " + weights);
  ASSERT_EQ(w.code, 0) << w.out;
  EXPECT_NE(w.out.find("total parameters 2,235,537"), std::string::npos);

  const auto bytes = slurp(weights);
  spit(dir.file("cut.fcw"), bytes.substr(0, bytes.size() / 2));
  EXPECT_EQ(fckit_run("inspect " + dir.file("cut.fcw")).code, 2);
  spit(dir.file("junk.fcw"), "not weights at all");
  EXPECT_EQ(fckit_run("inspect " + dir.file("junk.fcw")).code, 2);

  const auto s = fckit_run("inspect --variant fcs");
  ASSERT_EQ(s.code, 0) << s.out;
  EXPECT_NE(s.out.find("variant FC-S"), std::string::npos) << s.out;
}

TEST(Cli, GradcheckPasses) {
  const auto r = fckit_run("gradcheck --seeds 2");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("all passed"), std::string::npos) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST(Cli, TrainValidatesConfiguration) {
  TempDir dir("cli_trainval");
  const auto manifest = write_synth(dir, 10);
  EXPECT_EQ(fckit_run("train --train-manifest " + manifest + " -o " + dir.file("r") + " --variant fcs").code, 1);
  EXPECT_EQ(fckit_run("train -o " + dir.file("r")).code, 1);
  EXPECT_EQ(fckit_run("train --train-manifest " + manifest + " -o " + dir.file("r") + " --set no_such_key=1").code, 1);
  EXPECT_EQ(fckit_run("train --train-manifest " + manifest + " -o " + dir.file("r") + " --batch-size 0").code, 1);
  EXPECT_EQ(fckit_run("train --config " + dir.file("absent.cfg")).code, 2);
}

TEST(Cli, TrainResumeAndSequenceStage) {
  TempDir dir("cli_train");
  const auto manifest = write_synth(dir, 20);
  const auto out = dir.file("fc");
  const auto common = "train -q --train-manifest " + manifest + " --val-manifest " + manifest + " --batch-size 8 -o " + out;
  auto r = fckit_run(common + " --epochs 1");
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"train.log", "val.log", "last.fcw", "last.opt", "last.json", "best.fcw", "final.fcw"})
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(out) / f)) << f;
  EXPECT_EQ(count_lines(slurp(out + "/train.log")), 1u + 3u);  // header + ceil(20/8) steps
  EXPECT_EQ(count_lines(slurp(out + "/val.log")), 2u);

  r = fckit_run(common + " --epochs 2 --resume");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto log = slurp(out + "/train.log");
  EXPECT_EQ(count_lines(log), 1u + 6u);
  EXPECT_EQ(log.rfind("epoch,", 0), 0u);
  EXPECT_NE(log.find("\n2,6,"), std::string::npos) << log;

  // two 10-frame clips from the same frames, starting from the FC weights
  const auto seq = dir.file("fcs");
  r = fckit_run("train -q --variant fcs --epochs 1 --batch-size 2 --train-manifest " + manifest + " --base-weights " +
                out + "/final.fcw -o " + seq);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto insp = fckit_run("inspect " + seq + "/final.fcw");
  EXPECT_NE(insp.out.find("variant FC-S"), std::string::npos) << insp.out;

  std::string frames;
  for (int i = 0; i < 10; ++i) frames += " " + dir.file("synth/synth0_" + std::to_string(i) + ".f32");
  const auto p = fckit_run("predict -w " + seq + "/final.fcw" + frames);
  ASSERT_EQ(p.code, 0) << p.out;
  EXPECT_EQ(count_lines(p.out), 2u);
  EXPECT_EQ(fckit_run("predict -w " + seq + "/final.fcw " + dir.file("synth/synth0_0.f32")).code, 1);
  const auto e = fckit_run("eval -w " + seq + "/final.fcw -m " + manifest);
  EXPECT_EQ(e.code, 0) << e.out;
}

TEST(Cli, EvalOnOracleFixture) {
  TempDir dir("cli_oracle");
  const auto manifest = write_synth(dir, 14);
  const auto model = build_facechannel(kDefaultClasses, 11);
  save_weights(model, dir.file("m.fcw"));
  // relabel every sample with the model's own output
  auto samples = parse_manifest(manifest);
  const auto pred = predict_all(model, Dataset::from_samples(samples, manifest_dir(manifest)));
  const auto triples = to_triples(pred);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].arousal = triples[i].arousal;
    samples[i].valence = triples[i].valence;
    samples[i].expression = triples[i].predicted_class();
  }
  write_manifest(manifest, samples);
  const auto r = fckit_run("eval -w " + dir.file("m.fcw") + " -m " + manifest);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out, "Arousal,Valence,F1-Score,Accuracy\n1.0000,1.0000,1.0000,1.0000\n");
}

TEST(Cli, RerunsAreByteIdentical) {
  TempDir dir("cli_rerun");
  const auto manifest = write_synth(dir, 12);
  const auto args = "train -q --train-manifest " + manifest + " --val-manifest " + manifest +
                    " --set balance=dim --epochs 2 --batch-size 4 --seed 3 -o ";
  ASSERT_EQ(fckit_run(args + dir.file("a")).code, 0);
  ASSERT_EQ(fckit_run(args + dir.file("b")).code, 0);
  for (const char* f : {"train.log", "val.log", "final.fcw", "best.fcw", "last.opt", "last.json"})
    EXPECT_EQ(slurp(dir.file(std::string("a/") + f)), slurp(dir.file(std::string("b/") + f))) << f;
}

TEST(Cli, TrainOverfitsSyntheticFixture) {
  TempDir dir("cli_overfit");
  const auto manifest = write_synth(dir, 64);
  const auto before = slurp(manifest);
  const auto r = fckit_run("train --train-manifest " + manifest + " --epochs 15 --batch-size 16 -o " + dir.file("r"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto at = r.out.rfind("epoch 15  loss ");
  ASSERT_NE(at, std::string::npos) << r.out;
  EXPECT_LT(std::stod(r.out.substr(at + 15)), 0.05) << r.out;
  EXPECT_EQ(count_lines(slurp(dir.file("r/train.log"))), 1u + 15u * 4u);
  EXPECT_EQ(slurp(manifest), before);
}
