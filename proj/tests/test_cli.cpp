#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mspnet/io.hpp"
#include "mspnet/model.hpp"
#include "mspnet/occlusion.hpp"
#include "mspnet/shapedata.hpp"

using namespace mspnet;
namespace fs = std::filesystem;
using nlohmann::json;

TEST_SUITE_BEGIN("cli");

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(MSPNET_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

long long line_count(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    long long n = 0;
    while (std::getline(in, line)) ++n;
    return n;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "mspnet_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// A cube of label 1 inside an otherwise empty volume: 3x3x3 solid block.
fs::path write_cube_volume(const fs::path& dir) {
    LabelVolume vol;
    vol.dims = {7, 7, 7};
    vol.labels.assign(7 * 7 * 7, 0);
    for (int z = 2; z <= 4; ++z)
        for (int y = 2; y <= 4; ++y)
            for (int x = 2; x <= 4; ++x) vol.labels[vol.linear(x, y, z)] = 1;
    const fs::path p = dir / "cube.json";
    write_label_volume(vol, p.string());
    return p;
}

const std::string kToyModelFlags =
    " --feature-mlp 8,8 --post-mlp 8,16 --head 32,16"
    " --point-tnet-mlp 8,16 --point-tnet-fc 8 --feature-tnet-mlp 8,16 --feature-tnet-fc 8";

} // namespace

TEST_CASE("extract") {
    const fs::path dir = fresh_dir("extract");
    const fs::path vol = write_cube_volume(dir);

    SUBCASE("boundary of the block yields a 26-line cloud") {
        REQUIRE(run("extract --volume " + vol.string() + " --label 1 --points 26 --seed 3 --out " +
                    (dir / "out").string()) == 0);
        CHECK(line_count(dir / "out" / "cube_s0.xyz") == 26);
        CHECK(fs::exists(dir / "out" / "manifest.json"));
    }
    SUBCASE("absent label exits with the data error code") {
        CHECK(run("extract --volume " + vol.string() + " --label 99 --points 8 --out " +
                  (dir / "out99").string()) == 2);
    }
    SUBCASE("same seed is byte identical") {
        REQUIRE(run("extract --volume " + vol.string() + " --label 1 --points 16 --seed 5 --out " +
                    (dir / "a").string()) == 0);
        REQUIRE(run("extract --volume " + vol.string() + " --label 1 --points 16 --seed 5 --out " +
                    (dir / "b").string()) == 0);
        CHECK(slurp(dir / "a" / "cube_s0.xyz") == slurp(dir / "b" / "cube_s0.xyz"));
        CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));
    }
    SUBCASE("unknown option is a usage error") {
        CHECK(run("extract --volume " + vol.string() + " --label 1 --frobnicate") == 1);
    }
    SUBCASE("missing volume file is a data error") {
        CHECK(run("extract --volume " + (dir / "nope.json").string() + " --label 1 --out " +
                  dir.string()) == 2);
    }
}

TEST_CASE("synth") {
    const fs::path dir = fresh_dir("synth");
    const std::string base = "synth --subjects 20 --structures 2 --points 32 --seed 11 --out ";

    REQUIRE(run(base + (dir / "a").string()) == 0);
    long long clouds = 0;
    for (const auto& e : fs::directory_iterator(dir / "a"))
        if (e.path().extension() == ".xyz") ++clouds;
    CHECK(clouds == 40);
    CHECK(fs::exists(dir / "a" / "manifest.json"));
    CHECK(fs::exists(dir / "a" / "truth.json"));

    SUBCASE("classes are balanced") {
        Manifest m = read_manifest((dir / "a" / "manifest.json").string());
        long long ones = 0;
        for (const auto& e : m.entries) ones += (long long)*e.target;
        CHECK(ones == 10);
    }
    SUBCASE("same seed is byte identical") {
        REQUIRE(run(base + (dir / "b").string()) == 0);
        CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));
        CHECK(slurp(dir / "a" / "synth-0_s0.xyz") == slurp(dir / "b" / "synth-0_s0.xyz"));
        CHECK(slurp(dir / "a" / "synth-19_s1.xyz") == slurp(dir / "b" / "synth-19_s1.xyz"));
        CHECK(slurp(dir / "a" / "truth.json") == slurp(dir / "b" / "truth.json"));
    }
}

TEST_CASE("train, eval and explain round trip") {
    const fs::path dir = fresh_dir("pipeline");
    REQUIRE(run("synth --subjects 20 --structures 2 --points 32 --seed 21 --out " +
                (dir / "data").string()) == 0);
    const std::string manifest = (dir / "data" / "manifest.json").string();
    const std::string train_args = "train --manifest " + manifest + kToyModelFlags +
                                   " --epochs 2 --batch-size 4 --ratios 0.75,0.0,0.25 --seed 9 --out ";

    REQUIRE(run(train_args + (dir / "run1").string()) == 0);
    CHECK(line_count(dir / "run1" / "epochs.csv") == 3); // header + one line per epoch
    REQUIRE(fs::exists(dir / "run1" / "checkpoint.json"));
    REQUIRE(fs::exists(dir / "run1" / "checkpoint.bin"));

    SUBCASE("identical rerun is byte identical") {
        REQUIRE(run(train_args + (dir / "run2").string()) == 0);
        CHECK(slurp(dir / "run1" / "epochs.csv") == slurp(dir / "run2" / "epochs.csv"));
        CHECK(slurp(dir / "run1" / "checkpoint.bin") == slurp(dir / "run2" / "checkpoint.bin"));
        CHECK(slurp(dir / "run1" / "checkpoint.json") == slurp(dir / "run2" / "checkpoint.json"));
    }
    SUBCASE("the thread cap does not change the artifacts") {
        REQUIRE(run("--threads 2 " + train_args + (dir / "run_t2").string()) == 0);
        CHECK(slurp(dir / "run1" / "epochs.csv") == slurp(dir / "run_t2" / "epochs.csv"));
        CHECK(slurp(dir / "run1" / "checkpoint.bin") == slurp(dir / "run_t2" / "checkpoint.bin"));
    }
    SUBCASE("non-finite training aborts with the numeric exit code") {
        // Targets whose train-split mean overflows poison the standardized
        // regression loss on the first batch.
        Manifest m = read_manifest(manifest);
        for (auto& e : m.entries) e.target = 1e308;
        const fs::path poisoned = dir / "data" / "poisoned.json";
        write_manifest(m, poisoned.string());
        CHECK(run("train --manifest " + poisoned.string() + kToyModelFlags +
                  " --task regression --epochs 1 --batch-size 4 --ratios 0.75,0.0,0.25 --seed 2 --out " +
                  (dir / "runp").string()) == 3);
    }
    SUBCASE("the pooled baseline trains under the same flags") {
        REQUIRE(run(train_args + (dir / "runpn").string() + " --model pointnet") == 0);
        json ck;
        std::ifstream in(dir / "runpn" / "checkpoint.json");
        in >> ck;
        CHECK(ck.at("model").at("type") == "pointnet");
    }
    SUBCASE("eval writes a self-consistent metrics file") {
        const fs::path metrics = dir / "metrics.json";
        REQUIRE(run("eval --checkpoint " + (dir / "run1" / "checkpoint.json").string() + " --manifest " +
                    manifest + " --split test --out " + metrics.string()) == 0);
        json j;
        std::ifstream in(metrics);
        in >> j;
        const auto confusion = j.at("confusion").get<std::vector<std::vector<long long>>>();
        double macro_p = 0.0;
        const int c = (int)confusion.size();
        for (int i = 0; i < c; ++i) {
            long long tp = confusion[(std::size_t)i][(std::size_t)i], col = 0;
            for (int r = 0; r < c; ++r) col += confusion[(std::size_t)r][(std::size_t)i];
            macro_p += (col ? (double)tp / col : 0.0) / c;
        }
        CHECK(j.at("macro").at("precision").get<double>() == doctest::Approx(macro_p).epsilon(1e-8));
        long long total = 0;
        for (const auto& row : confusion)
            for (long long v : row) total += v;
        CHECK(total == 5); // 25% of 20 subjects
    }
    SUBCASE("explain emits matching csv and ply, identically across reruns") {
        const std::string explain_args = "explain --checkpoint " +
                                         (dir / "run1" / "checkpoint.json").string() + " --manifest " +
                                         manifest + " --subject synth-3 --structure 0 --k 4 --out ";
        REQUIRE(run(explain_args + (dir / "imp1").string()) == 0);
        REQUIRE(run(explain_args + (dir / "imp2").string()) == 0);
        CHECK(line_count(dir / "imp1.csv") == 33); // header + n rows
        CHECK(slurp(dir / "imp1.csv") == slurp(dir / "imp2.csv"));
        CHECK(slurp(dir / "imp1.ply") == slurp(dir / "imp2.ply"));

        // The CSV agrees with a direct library call.
        Model model = load_checkpoint((dir / "run1" / "checkpoint.json").string());
        Dataset ds = load_dataset(manifest);
        const MultiStructureSample* subject = nullptr;
        for (const auto& s : ds.samples)
            if (s.subject_id == "synth-3") subject = &s;
        REQUIRE(subject != nullptr);
        ImportanceMap map = importance_map(model, normalize_subject(*subject), 0, 4);

        std::ifstream csv(dir / "imp1.csv");
        std::string line;
        std::getline(csv, line); // header
        for (int i = 0; i < 32; ++i) {
            REQUIRE(std::getline(csv, line));
            const auto last_comma = line.rfind(',');
            const double value = std::stod(line.substr(last_comma + 1));
            CHECK(value == doctest::Approx(map.values[(std::size_t)i]).epsilon(1e-8));
        }
    }
    SUBCASE("unknown subject is a data error") {
        CHECK(run("explain --checkpoint " + (dir / "run1" / "checkpoint.json").string() +
                  " --manifest " + manifest + " --subject nobody --out " + (dir / "x").string()) == 2);
    }
}

TEST_CASE("toy training run stays fast") {
    const fs::path dir = fresh_dir("budget");
    REQUIRE(run("synth --subjects 20 --structures 2 --points 32 --seed 33 --out " +
                (dir / "data").string()) == 0);
    const auto start = std::chrono::steady_clock::now();
    REQUIRE(run("train --manifest " + (dir / "data" / "manifest.json").string() + kToyModelFlags +
                " --epochs 2 --batch-size 4 --ratios 0.75,0.0,0.25 --seed 1 --out " +
                (dir / "run").string()) == 0);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    CHECK(seconds < 60.0);
}

TEST_SUITE_END();
