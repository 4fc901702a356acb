#include <catch2/catch.hpp>

#include <cstdio>
#include <fstream>

#include "gseg/graph.hpp"
#include "gseg/model_io.hpp"
#include "test_util.hpp"

using namespace gseg;
using testutil::central_fd;
using testutil::max_rel_err;
using testutil::random_tensor;

namespace {

// conv3(S=2,K=2,pool2) -> dropout(0.25) -> softmax conv5; receptive field 8.
ModelGraph mini_graph(int input_channels = 2) {
  ModelGraph g;
  g.input_channels = input_channels;
  g.label_count = 5;
  LayerSpec block;
  block.kind = LayerKind::ConvMaxoutPool;
  block.name = "block";
  block.kernel = 3;
  block.out_maps = 2;
  block.maxout_k = 2;
  block.pool_p = 2;
  block.pool_stride = 1;
  block.input_refs = {kInputRef};
  LayerSpec drop;
  drop.kind = LayerKind::Dropout;
  drop.dropout_prob = 0.25;
  drop.input_refs = {0};
  LayerSpec out;
  out.kind = LayerKind::SoftmaxConvOutput;
  out.name = "out";
  out.kernel = 5;
  out.out_maps = 5;
  out.input_refs = {1};
  g.layers = {block, drop, out};
  return g;
}

template <class S>
std::vector<double*> flat_params(ParameterStoreT<S>& store);

template <>
std::vector<double*> flat_params(ParameterStoreT<double>& store) {
  std::vector<double*> ptrs;
  for (auto& [n, b] : store.banks) {
    for (auto& w : b.weights) ptrs.push_back(&w);
    for (auto& v : b.bias) ptrs.push_back(&v);
  }
  return ptrs;
}

// Smallest winner/runner-up margin across the block's maxout groups and pool
// windows; finite differences need it clear of the perturbation radius.
double block_min_gap(const ParameterStoreT<double>& store, const TensorT<double>& input) {
  auto o = conv2d_valid(input, store.find("block"));
  double gap = 1e300;
  const std::size_t plane = static_cast<std::size_t>(o.height) * o.width;
  for (int grp = 0; grp < 2; ++grp)
    for (std::size_t i = 0; i < plane; ++i)
      gap = std::min(gap, std::abs(o.channel(2 * grp)[i] - o.channel(2 * grp + 1)[i]));
  auto z = maxout(o, 2);
  for (int c = 0; c < z.channels; ++c)
    for (int oy = 0; oy + 2 <= z.height; ++oy)
      for (int ox = 0; ox + 2 <= z.width; ++ox) {
        double best = -1e300, second = -1e300;
        for (int u = 0; u < 2; ++u)
          for (int v = 0; v < 2; ++v) {
            const double w = z.at(c, oy + u, ox + v);
            if (w > best) { second = best; best = w; }
            else if (w > second) second = w;
          }
        gap = std::min(gap, best - second);
      }
  return gap;
}

std::string temp_path(const char* stem) {
  return std::string("/tmp/gseg_test_") + stem + "_" + std::to_string(::getpid());
}

}  // namespace

TEST_CASE("mini graph forward shapes and test-mode determinism") {
  ModelGraph g = mini_graph();
  CHECK(receptive_field(g) == 8);
  auto store = init_parameters<float>(g, {0.2, 0.2, 0.2, 0.2, 0.2}, 5);

  Rng rng(1);
  auto x = random_tensor<float>(rng, 2, 8, 8);
  auto t1 = forward(g, store, x);
  auto t2 = forward(g, store, x);
  REQUIRE(t1.sink().channels == 5);
  CHECK(t1.sink().height == 1);
  CHECK(t1.sink().width == 1);
  for (std::size_t i = 0; i < t1.sink().size(); ++i)
    CHECK(t1.sink().data[i] == t2.sink().data[i]);

  auto bigger = random_tensor<float>(rng, 2, 12, 10);
  auto t3 = forward(g, store, bigger);
  CHECK(t3.sink().height == 5);  // 12 - (8-1)
  CHECK(t3.sink().width == 3);

  auto tiny = random_tensor<float>(rng, 2, 7, 7);
  CHECK_THROWS_AS(forward(g, store, tiny), DataError);
  auto wrong_ch = random_tensor<float>(rng, 3, 8, 8);
  CHECK_THROWS_AS(forward(g, store, wrong_ch), DataError);
}

TEST_CASE("sink emits a valid distribution at every position") {
  ModelGraph g = mini_graph();
  auto store = init_parameters<float>(g, {0.5, 0.2, 0.1, 0.1, 0.1}, 9);
  Rng rng(2);
  auto x = random_tensor<float>(rng, 2, 14, 14);
  auto t = forward(g, store, x);
  const auto& p = t.sink();
  const std::size_t plane = static_cast<std::size_t>(p.height) * p.width;
  for (std::size_t i = 0; i < plane; ++i) {
    double sum = 0;
    for (int c = 0; c < 5; ++c) {
      CHECK(p.data[c * plane + i] >= 0.0f);
      sum += p.data[c * plane + i];
    }
    CHECK(sum == Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("whole-graph gradients match finite differences") {
  for (int seed = 0; seed < 20; ++seed) {
    ModelGraph g = mini_graph();
    TensorT<double> x;
    ParameterStoreT<double> store;
    {
      Rng rng(9000 + seed * 17);
      int tries = 0;
      do {
        x = random_tensor<double>(rng, 2, 8, 8);
        store = init_parameters<double>(g, {0.2, 0.2, 0.2, 0.2, 0.2}, rng.next_u64());
        // inflate weights so maxout/pool margins are macroscopic, and keep
        // them clear of the |w| kink that L1 puts at zero
        for (auto& [n, b] : store.banks)
          for (auto& w : b.weights) {
            w *= 200.0;
            w += (w >= 0.0 ? 0.01 : -0.01);
          }
        REQUIRE(++tries < 50);
      } while (block_min_gap(store, x) < 1e-2);
    }
    std::vector<std::uint8_t> labels = {static_cast<std::uint8_t>(seed % 5)};
    const double l1 = (seed % 2) ? 0.01 : 0.0;
    const double l2 = (seed % 3) ? 0.003 : 0.0;

    auto trace = forward(g, store, x, true, 42);
    auto back = backward(g, store, trace, x, labels, l1, l2);

    auto params = flat_params(store);
    const auto objective = [&] {
      auto t = forward(g, store, x, true, 42);
      auto b = backward(g, store, t, x, labels, l1, l2);
      return b.loss;
    };
    std::vector<double> analytic;
    for (auto& [n, b] : back.grads.banks) {
      for (double w : b.weights) analytic.push_back(w);
      for (double v : b.bias) analytic.push_back(v);
    }
    std::vector<double> fd(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double keep = *params[i];
      *params[i] = keep + 1e-3;
      const double up = objective();
      *params[i] = keep - 1e-3;
      const double dn = objective();
      *params[i] = keep;
      fd[i] = (up - dn) / 2e-3;
    }
    CHECK(max_rel_err(analytic, fd) < 1e-4);
  }
}

TEST_CASE("backward loss and gradient closed forms") {
  ModelGraph g = mini_graph();
  auto store = init_parameters<float>(g, {0.2, 0.2, 0.2, 0.2, 0.2}, 3);

  SECTION("one-hot prediction gives zero loss and zero output-bias gradient") {
    // saturate the output bias toward class 2
    auto& out = store.find("out");
    for (int c = 0; c < 5; ++c) out.bias[c] = (c == 2) ? 60.0f : -60.0f;
    Rng rng(4);
    auto x = random_tensor<float>(rng, 2, 8, 8);
    auto trace = forward(g, store, x, true, 7);
    std::vector<std::uint8_t> labels = {2};
    auto back = backward(g, store, trace, x, labels, 0.0, 0.0);
    CHECK(back.loss == Approx(0.0).margin(1e-5));
    for (float v : back.grads.find("out").bias) CHECK(std::abs(v) < 1e-5);
  }

  SECTION("with zero data gradient the parameter gradient is 2*lambda2*W") {
    auto& out = store.find("out");
    for (int c = 0; c < 5; ++c) out.bias[c] = (c == 1) ? 60.0f : -60.0f;
    Rng rng(5);
    auto x = random_tensor<float>(rng, 2, 8, 8);
    auto trace = forward(g, store, x, true, 7);
    std::vector<std::uint8_t> labels = {1};
    const double lambda2 = 0.05;
    auto back = backward(g, store, trace, x, labels, 0.0, lambda2);
    for (std::size_t b = 0; b < store.banks.size(); ++b)
      for (std::size_t j = 0; j < store.banks[b].second.weights.size(); ++j) {
        const float want = 2.0f * static_cast<float>(lambda2) * store.banks[b].second.weights[j];
        CHECK(back.grads.banks[b].second.weights[j] == Approx(want).margin(1e-6));
      }
  }

  SECTION("labels outside the class range are rejected") {
    Rng rng(6);
    auto x = random_tensor<float>(rng, 2, 8, 8);
    auto trace = forward(g, store, x, true, 7);
    std::vector<std::uint8_t> labels = {9};
    CHECK_THROWS_AS(backward(g, store, trace, x, labels), DataError);
  }
}

TEST_CASE("apply_dropout contract") {
  Rng rng(7);
  auto x = random_tensor<float>(rng, 1, 100, 100);

  SECTION("prob 0 is the identity in both modes") {
    Rng r1(1), r2(1);
    auto train = apply_dropout(x, 0.0, true, r1);
    auto test = apply_dropout(x, 0.0, false, r2);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(train.data[i] == x.data[i]);
      CHECK(test.data[i] == x.data[i]);
    }
  }

  SECTION("test mode multiplies every unit by 1 - prob") {
    Rng r(1);
    auto test = apply_dropout(x, 0.5, false, r);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(test.data[i] == Approx(0.5f * x.data[i]).margin(1e-7));
  }

  SECTION("train mode: reproducible mask, kept fraction near 1 - prob") {
    Rng r1(99), r2(99);
    std::vector<std::uint8_t> m1, m2;
    auto a = apply_dropout(x, 0.3, true, r1, &m1);
    auto b = apply_dropout(x, 0.3, true, r2, &m2);
    REQUIRE(m1 == m2);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data[i] == b.data[i]);

    double kept = 0;
    for (std::uint8_t k : m1) kept += k;
    const double n = static_cast<double>(m1.size());
    const double sigma = std::sqrt(0.3 * 0.7 / n);
    CHECK(std::abs(kept / n - 0.7) < 3.0 * sigma);
  }

  SECTION("probabilities outside [0,1) are rejected") {
    Rng r(1);
    CHECK_THROWS_AS(apply_dropout(x, 1.0, true, r), DataError);
    CHECK_THROWS_AS(apply_dropout(x, -0.1, false, r), DataError);
  }
}

TEST_CASE("dropout expectation matches test-mode scaling") {
  Tensor x(1, 10, 10);
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = 2.0f + static_cast<float>(i % 7);
  Rng rng(123);
  std::vector<double> mean(x.size(), 0.0);
  const int samples = 10000;
  for (int s = 0; s < samples; ++s) {
    auto out = apply_dropout(x, 0.5, true, rng);
    for (std::size_t i = 0; i < out.size(); ++i) mean[i] += out.data[i];
  }
  Rng r2(1);
  auto test = apply_dropout(x, 0.5, false, r2);
  double train_total = 0.0, test_total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    train_total += mean[i] / samples;
    test_total += test.data[i];
  }
  CHECK(std::abs(train_total - test_total) / test_total < 0.02);
}

TEST_CASE("init_parameters contract") {
  ModelGraph g = mini_graph();

  SECTION("uniform frequencies set every output bias to log 0.2") {
    auto store = init_parameters<float>(g, {0.2, 0.2, 0.2, 0.2, 0.2}, 11);
    for (float b : store.find("out").bias)
      CHECK(b == Approx(std::log(0.2)).margin(1e-6));
    for (float b : store.find("block").bias) CHECK(b == 0.0f);
    for (float w : store.find("block").weights) {
      CHECK(w >= -0.005f);
      CHECK(w <= 0.005f);
    }
  }

  SECTION("clinical-scale class frequencies give bias0 = log 0.98") {
    auto store = init_parameters<float>(g, {0.98, 0.0018, 0.011, 0.0012, 0.0038}, 11);
    CHECK(store.find("out").bias[0] == Approx(std::log(0.98)).margin(1e-6));
    CHECK(store.find("out").bias[1] == Approx(std::log(0.0018)).margin(1e-6));
  }

  SECTION("same seed, same store") {
    auto a = init_parameters<float>(g, {0.2, 0.2, 0.2, 0.2, 0.2}, 77);
    auto b = init_parameters<float>(g, {0.2, 0.2, 0.2, 0.2, 0.2}, 77);
    REQUIRE(a.banks.size() == b.banks.size());
    for (std::size_t i = 0; i < a.banks.size(); ++i) {
      CHECK(a.banks[i].second.weights == b.banks[i].second.weights);
      CHECK(a.banks[i].second.bias == b.banks[i].second.bias);
    }
  }

  SECTION("nonpositive frequencies are rejected") {
    CHECK_THROWS_AS(init_parameters<float>(g, {1.0, 0.0, 0.0, 0.0, 0.0}, 1), DataError);
    CHECK_THROWS_AS(init_parameters<float>(g, {0.5, 0.2, 0.2, 0.2, 0.2}, 1), DataError);
  }
}

TEST_CASE("model save/load round trip") {
  ModelGraph g = mini_graph();
  auto store = init_parameters<float>(g, {0.2, 0.2, 0.2, 0.2, 0.2}, 21);
  const std::string p1 = temp_path("model1");
  const std::string p2 = temp_path("model2");
  save_model(g, store, p1, "custom", {0.2, 0.2, 0.2, 0.2, 0.2});

  SECTION("save -> load -> save is byte identical") {
    ModelFile loaded = load_model(p1);
    save_model(loaded, p2);
    std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    REQUIRE(!sa.empty());
    CHECK(sa == sb);
  }

  SECTION("forward(loaded) is bitwise forward(original)") {
    ModelFile loaded = load_model(p1);
    Rng rng(31);
    auto x = random_tensor<float>(rng, 2, 10, 10);
    auto t0 = forward(g, store, x);
    auto t1 = forward(loaded.graphs[0], loaded.stores[0], x);
    REQUIRE(t0.sink().same_shape(t1.sink()));
    for (std::size_t i = 0; i < t0.sink().size(); ++i)
      CHECK(t0.sink().data[i] == t1.sink().data[i]);
  }

  SECTION("truncated file reports truncation") {
    std::ifstream in(p1, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(p2, std::ios::binary | std::ios::trunc);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 64));
    out.close();
    CHECK_THROWS_WITH(load_model(p2), Catch::Contains("truncated"));
  }

  SECTION("bad magic and bad version give distinct diagnostics") {
    {
      std::ofstream out(p2, std::ios::binary | std::ios::trunc);
      out.write("NOPE", 4);
      std::uint32_t v = 1;
      out.write(reinterpret_cast<char*>(&v), 4);
    }
    CHECK_THROWS_WITH(load_model(p2), Catch::Contains("magic"));
    {
      std::ifstream in(p1, std::ios::binary);
      std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      all[4] = 9;  // version field
      std::ofstream out(p2, std::ios::binary | std::ios::trunc);
      out.write(all.data(), static_cast<std::streamsize>(all.size()));
    }
    CHECK_THROWS_WITH(load_model(p2), Catch::Contains("version"));
  }

  std::remove(p1.c_str());
  std::remove(p2.c_str());
}
