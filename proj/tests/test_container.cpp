// Copyright 2026 The mxaffine Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "mxa/container.hpp"
#include "mxa/error.hpp"
#include "test_util.hpp"

using namespace mxa;
using namespace mxa::testing;

namespace {

using Bytes = std::vector<std::uint8_t>;

void put_le(Bytes& b, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

// Hand-assembled file for a single f32 tensor "x" = [1, 2, 3].
Bytes reference_f32_file() {
  Bytes b{'M', 'X', 'T', 'D'};
  put_le(b, 1, 2);
  put_le(b, 1, 4);
  put_le(b, 1, 2);
  b.push_back('x');
  b.push_back(1);
  b.push_back(1);
  put_le(b, 3, 8);
  for (float f : {1.0f, 2.0f, 3.0f}) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_le(b, u, 4);
  }
  return b;
}

std::filesystem::path temp_file(const char* name) {
  return std::filesystem::temp_directory_path() / (std::string("mxa_test_") + name);
}

}  // namespace

TEST_CASE("empty container round-trips") {
  TensorContainer c;
  Bytes b = serialize_container(c);
  CHECK(b.size() == 10);
  CHECK(deserialize_container(b) == c);
}

TEST_CASE("f32 tensor matches the documented layout") {
  const float vals[] = {1.0f, 2.0f, 3.0f};
  TensorContainer c;
  c.add(Tensor::f32("x", {3}, vals));
  Bytes b = serialize_container(c);
  CHECK(b == reference_f32_file());
  auto back = deserialize_container(b);
  CHECK(back == c);
  CHECK(serialize_container(back) == b);
  auto v = back.get("x").as_f64();
  CHECK(v == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("mixed dtypes round-trip through a file") {
  TensorContainer c;
  c.add(Tensor::matrix("m", random_matrix(3, 5, 1)));
  const std::uint32_t ids[] = {0, 7, 4294967295u};
  c.add(Tensor::u32("ids", {1, 3}, ids));
  Vector e;
  c.add(Tensor::f64("empty", {0, 4}, e));
  auto path = temp_file("mixed.mxtd");
  write_container(path, c);
  auto back = read_container(path);
  std::filesystem::remove(path);
  CHECK(back == c);
  CHECK(max_abs_diff(back.get("m").as_matrix(), c.get("m").as_matrix()) == 0.0);
  CHECK(back.get("ids").as_u32()[2] == 4294967295u);
  CHECK(back.get("empty").element_count() == 0);
}

TEST_CASE("malformed files are rejected") {
  Bytes good = reference_f32_file();
  SUBCASE("magic") {
    Bytes b = good;
    b[0] = 'N';
    CHECK_THROWS_AS(deserialize_container(b), FormatError);
  }
  SUBCASE("version") {
    Bytes b = good;
    b[4] = 2;
    CHECK_THROWS_AS(deserialize_container(b), FormatError);
  }
  SUBCASE("dtype") {
    Bytes b = good;
    b[13] = 9;
    CHECK_THROWS_AS(deserialize_container(b), FormatError);
  }
  SUBCASE("every truncation") {
    for (std::size_t n = 0; n < good.size(); ++n) {
      Bytes b(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(n));
      CHECK_THROWS_AS(deserialize_container(b), FormatError);
    }
  }
  SUBCASE("trailing bytes") {
    Bytes b = good;
    b.push_back(0);
    CHECK_THROWS_AS(deserialize_container(b), FormatError);
  }
  SUBCASE("duplicate names") {
    Bytes b = good;
    b[6] = 2;
    b.insert(b.end(), good.begin() + 10, good.end());
    CHECK_THROWS_AS(deserialize_container(b), FormatError);
  }
  CHECK_THROWS(read_container(temp_file("does_not_exist.mxtd")));
}

TEST_CASE("payload length must match shape") {
  Tensor t = Tensor::f64("a", {2, 2}, Vector(4, 1.0));
  t.shape = {2, 3};
  TensorContainer c;
  c.tensors.push_back(t);
  CHECK_THROWS(serialize_container(c));
}

TEST_CASE("model round-trip") {
  auto cfg = tiny_config();
  auto w = random_model(cfg, 5);
  auto c = model_to_container(w, cfg);
  auto back = deserialize_container(serialize_container(c));
  ModelWeights w2;
  ModelConfig cfg2;
  model_from_container(back, w2, cfg2);
  CHECK(cfg2.d_model == cfg.d_model);
  CHECK(cfg2.n_heads == cfg.n_heads);
  CHECK(cfg2.max_seq_len == cfg.max_seq_len);
  CHECK(cfg2.has_bias == cfg.has_bias);
  auto seqs = random_sequences(cfg, 2, 8, 6);
  CHECK(check_equivalence(w, w2, cfg, seqs) == 0.0);
  CHECK(serialize_container(model_to_container(w2, cfg2)) == serialize_container(c));
}

TEST_CASE("transform round-trip for both parameterizations") {
  auto cfg = tiny_config();
  InitSpec spec;
  spec.block = 8;
  spec.noise_std = 0.1;
  for (auto param : {Parameterization::LU, Parameterization::QR}) {
    auto p = init_learnable(cfg, spec, param, 7, true, 8);
    auto c = transforms_to_container(p);
    auto q = transforms_from_container(deserialize_container(serialize_container(c)));
    CHECK(q.t2.size() == p.t2.size());
    CHECK(q.t3_enabled);
    CHECK(q.t3_block == 8);
    auto a = p.assemble(), b = q.assemble();
    CHECK(max_abs_diff(a.t1.a(), b.t1.a()) == 0.0);
    CHECK(max_abs_diff(a.t2[1].a_inv(), b.t2[1].a_inv()) == 0.0);
    CHECK(serialize_container(transforms_to_container(q)) == serialize_container(c));
  }
}
