#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "fmd/checkpoint.hpp"
#include "fmd/datakit.hpp"
#include "support.hpp"

using namespace fmd;
using fmd::test::scratch_dir;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  static const auto log = scratch_dir("cli_logs") / "stdout.txt";
  const std::string cmd = std::string(FMD_CLI_PATH) + " " + args + " > " + log.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream os;
  os << in.rdbuf();
  r.out = os.str();
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool has_line(const std::string& text, const std::string& line) {
  return ("\n" + text).find("\n" + line + "\n") != std::string::npos;
}

const char* kTinyModel = "--ngf 4 --n-blocks 1 --ndf 4 --crop 24 --eval-pairs 0";

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run("").code == 2);
  CHECK(run("bogus").code == 2);
  CHECK(run("profile --frobnicate 1").code == 2);
  CHECK(run("profile --resolution 256").code == 2);
  CHECK(run("profile --resolution 255x256").code == 2);
  CHECK(run("profile --ngf 0").code == 2);
  CHECK(run("profile --decomposition Everything").code == 2);
  CHECK(run("gradcheck --precision 16").code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("profile") {
  auto r = run("profile --ngf 64 --resolution 256x256");
  CHECK(r.code == 0);
  CHECK(has_line(r.out, "total_params\t1987075"));
  CHECK(has_line(r.out, "total_macs\t18314428416"));
  r = run("profile --ngf 48 --resolution 256x256");
  CHECK(has_line(r.out, "total_params\t1130883"));
  const auto dir = scratch_dir("cli_profile");
  r = run("profile --decomposition UpAndRes --json " + (dir / "r.json").string());
  CHECK(r.code == 0);
  CHECK(slurp(dir / "r.json").find("\"total_params\": 1663235") != std::string::npos);
}

TEST_CASE("synth") {
  const auto dir = scratch_dir("cli_synth");
  SUBCASE("a delta kernel without noise copies the sharp image") {
    CHECK(run("synth --generate 3 --size 24 --kernel-size 1 --out " + (dir / "delta").string()).code == 0);
    const auto ds = load_dataset(dir / "delta");
    REQUIRE(ds.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(ds.load(i).blurred == ds.load(i).sharp);
  }
  SUBCASE("same seed, same bytes") {
    std::filesystem::create_directories(dir / "src");
    write_image(synthetic_image(30, 20, 1), dir / "src" / "a.ppm");
    write_image(synthetic_image(30, 20, 2), dir / "src" / "b.ppm");
    const std::string common = "synth --src " + (dir / "src").string() + " --kernel-size 7 --noise-sigma 2 --seed 9";
    CHECK(run(common + " --out " + (dir / "o1").string()).code == 0);
    CHECK(run(common + " --out " + (dir / "o2").string()).code == 0);
    for (const char* f : {"blur/a.ppm", "blur/b.ppm", "sharp/a.ppm"}) CHECK(slurp(dir / "o1" / f) == slurp(dir / "o2" / f));
    CHECK(slurp(dir / "o1" / "blur/a.ppm") != slurp(dir / "o1" / "sharp/a.ppm"));
    CHECK(load_dataset(dir / "o1").size() == 2);
  }
  SUBCASE("empty or missing sources exit 1") {
    std::filesystem::create_directories(dir / "empty");
    CHECK(run("synth --src " + (dir / "empty").string() + " --out " + (dir / "x").string()).code == 1);
    CHECK(run("synth --src " + (dir / "nope").string() + " --out " + (dir / "x").string()).code == 1);
  }
}

TEST_CASE("train, resume, infer and eval") {
  const auto dir = scratch_dir("cli_train");
  REQUIRE(run("synth --generate 4 --size 28 --kernel-size 5 --out " + (dir / "data").string()).code == 0);
  const std::string data = (dir / "data").string(), out = (dir / "run").string();
  std::ofstream(dir / "a.cfg") << "ngf = 8\nseed = 3\n";

  auto r = run("train --data " + data + " --out " + out + " --config " + (dir / "a.cfg").string() + " " + kTinyModel +
               " --max-steps 3");
  REQUIRE(r.code == 0);
  CHECK(has_line(r.out, "steps\t3"));
  const auto ckpt = load_checkpoint(dir / "run" / "checkpoint.fmdc");
  CHECK(ckpt.meta_value("cfg.ngf") == "4");   // the flag wins
  CHECK(ckpt.meta_value("cfg.seed") == "3");  // the file fills the rest

  r = run("train --data " + data + " --out " + out + " --resume --max-steps 5");
  CHECK(r.code == 0);
  CHECK(has_line(r.out, "steps\t5"));
  CHECK(run("train --data " + data + " --out " + out + " --resume --ngf 8").code == 2);

  std::ofstream(dir / "bad.cfg") << "ngf = 8\nlearning_rate = 1\n";
  CHECK(run("train --data " + data + " --out " + (dir / "x").string() + " --config " + (dir / "bad.cfg").string()).code ==
        2);
  CHECK(run("train --data " + (dir / "none").string() + " --out " + (dir / "x").string()).code == 1);

  const auto ck = (dir / "run" / "checkpoint.fmdc").string();
  for (auto [w, h] : {std::pair<int, int>{16, 12}, {13, 10}}) {
    write_image(synthetic_image(w, h, 5), dir / "in.ppm");
    r = run("infer --checkpoint " + ck + " --input " + (dir / "in.ppm").string() + " --output " +
            (dir / "out.ppm").string());
    CHECK(r.code == 0);
    const Image out = read_image(dir / "out.ppm");
    CHECK(out.width == static_cast<std::size_t>(w));
    CHECK(out.height == static_cast<std::size_t>(h));
  }
  CHECK(run("infer --checkpoint " + (dir / "missing.fmdc").string() + " --input " + (dir / "in.ppm").string() +
            " --output " + (dir / "o.ppm").string())
            .code == 1);
  const std::string bytes = slurp(ck);
  std::ofstream(dir / "cut.fmdc", std::ios::binary) << bytes.substr(0, bytes.size() - 4);
  CHECK(run("infer --checkpoint " + (dir / "cut.fmdc").string() + " --input " + (dir / "in.ppm").string() +
            " --output " + (dir / "o.ppm").string())
            .code == 3);
  std::ofstream(dir / "bad.ppm", std::ios::binary) << "P6\n4 4\n255\nxx";
  CHECK(run("infer --checkpoint " + ck + " --input " + (dir / "bad.ppm").string() + " --output " +
            (dir / "o.ppm").string())
            .code == 3);

  r = run("eval --data " + data + " --checkpoint " + ck);
  CHECK(r.code == 0);
  CHECK(has_line(r.out, "pairs\t4"));
}

TEST_CASE("eval on identical pairs without a model") {
  const auto dir = scratch_dir("cli_eval");
  REQUIRE(run("synth --generate 2 --size 24 --kernel-size 1 --out " + dir.string()).code == 0);
  const auto r = run("eval --data " + dir.string());
  CHECK(r.code == 0);
  CHECK(has_line(r.out, "psnr\tinf"));
  CHECK(has_line(r.out, "ssim\t1"));
}

TEST_CASE("gradcheck") {
  const auto r = run("gradcheck --precision 64 --trials 2 --skip-composed");
  CHECK(r.code == 0);
  CHECK(has_line(r.out, "result\tPASS"));
  CHECK(r.out.find("wgan_gp_d_loss/critic_weight") != std::string::npos);
}
