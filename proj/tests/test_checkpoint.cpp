#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "pmae/checkpoint.hpp"
#include "pmae/errors.hpp"
#include "pmae/rng.hpp"
#include "pmae/tensor.hpp"

using namespace pmae;

namespace {

std::string temp_path(const std::string& stem) {
    return std::string("/tmp/pmae_test_") + stem + "_" + std::to_string(::getpid()) + ".bin";
}

Tensor rand_tensor(Shape shape, Rng& rng, DType dt = DType::F64) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal();
    Tensor t = Tensor::from_data(std::move(shape), std::move(v));
    t.set_dtype(dt);
    return t;
}

std::vector<char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

NamedTensors sample_tensors() {
    Rng rng(7);
    NamedTensors out;
    out.emplace_back("enc.embed.w", rand_tensor({4, 3}, rng));
    out.emplace_back("scalar", Tensor::from_data({}, {0.5}));
    out.emplace_back("dec.head.w", rand_tensor({2, 2, 2}, rng, DType::F32));
    return out;
}

} // namespace

TEST_CASE("checkpoint round-trip preserves names, shapes, dtypes, values") {
    const std::string path = temp_path("ckpt_rt");
    NamedTensors tensors = sample_tensors();
    save_checkpoint(path, tensors);
    NamedTensors back = load_checkpoint(path);

    REQUIRE(back.size() == tensors.size());
    for (size_t i = 0; i < tensors.size(); ++i) {
        CHECK(back[i].first == tensors[i].first);
        CHECK(back[i].second.shape() == tensors[i].second.shape());
        CHECK(back[i].second.dtype() == tensors[i].second.dtype());
        const auto& a = tensors[i].second.data();
        const auto& b = back[i].second.data();
        REQUIRE(a.size() == b.size());
        for (size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint save is byte-stable across writes") {
    const std::string p1 = temp_path("ckpt_b1");
    const std::string p2 = temp_path("ckpt_b2");
    NamedTensors tensors = sample_tensors();
    save_checkpoint(p1, tensors);
    save_checkpoint(p2, tensors);
    CHECK(file_bytes(p1) == file_bytes(p2));

    // save(load(save(x))) must also be byte-identical
    NamedTensors back = load_checkpoint(p1);
    const std::string p3 = temp_path("ckpt_b3");
    save_checkpoint(p3, back);
    CHECK(file_bytes(p1) == file_bytes(p3));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
    std::remove(p3.c_str());
}

TEST_CASE("f32 tensors survive the round trip exactly") {
    const std::string path = temp_path("ckpt_f32");
    Rng rng(11);
    Tensor t = rand_tensor({5, 7}, rng, DType::F32);
    NamedTensors tensors;
    tensors.emplace_back("t", t);
    save_checkpoint(path, tensors);
    NamedTensors back = load_checkpoint(path);
    const auto& a = t.data();
    const auto& b = back[0].second.data();
    for (size_t j = 0; j < a.size(); ++j) {
        CHECK(a[j] == b[j]);
        CHECK(static_cast<double>(static_cast<float>(a[j])) == a[j]);
    }
    std::remove(path.c_str());
}

TEST_CASE("find_tensor returns the named entry and rejects unknown names") {
    NamedTensors tensors = sample_tensors();
    const Tensor& t = find_tensor(tensors, "scalar");
    CHECK(t.numel() == 1);
    CHECK(t.data()[0] == 0.5);
    CHECK_THROWS_AS(find_tensor(tensors, "missing"), IoError);
}

TEST_CASE("loading rejects a bad magic, truncation, and trailing bytes") {
    const std::string path = temp_path("ckpt_bad");
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE";
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);

    NamedTensors tensors = sample_tensors();
    save_checkpoint(path, tensors);
    auto bytes = file_bytes(path);
    {
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 3));
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    {
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out << "xx";
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    std::remove(path.c_str());
}

TEST_CASE("loading a nonexistent path names the file") {
    try {
        load_checkpoint("/tmp/pmae_definitely_missing.bin");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("pmae_definitely_missing") != std::string::npos);
    }
}
