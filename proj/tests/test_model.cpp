#include <cmath>
#include <functional>

#include "doctest.h"
#include "ovcp/model.hpp"
#include "test_util.hpp"

using namespace ovcp;
using testutil::random_mat;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.frame_size = 8;
  cfg.patch_size = 4;  // 2x2 grid -> 5 tokens
  cfg.frames_t = 2;
  cfg.embed_dim = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.window = 1;
  return cfg;
}

VideoSet random_videos(const ModelConfig& cfg, int n, uint64_t seed, bool static_frames = false) {
  VideoSet vs;
  vs.n = n;
  vs.t = cfg.frames_t;
  vs.h = vs.w = cfg.frame_size;
  vs.c = ModelConfig::kChannels;
  vs.pixels.resize(static_cast<size_t>(n) * static_cast<size_t>(vs.video_numel()));
  vs.class_ids.assign(static_cast<size_t>(n), 0);
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    float* v = vs.video(i);
    for (int64_t p = 0; p < vs.frame_numel(); ++p) v[p] = static_cast<float>(rng.uniform());
    for (int t = 1; t < vs.t; ++t) {
      float* f = v + t * vs.frame_numel();
      if (static_frames) {
        std::copy(v, v + vs.frame_numel(), f);
      } else {
        for (int64_t p = 0; p < vs.frame_numel(); ++p) f[p] = static_cast<float>(rng.uniform());
      }
    }
  }
  vs.validate();
  return vs;
}

template <typename S>
ParamVectorT<S> params_as(const ParamVector& p) {
  if constexpr (std::is_same_v<S, float>) {
    return p;
  } else {
    return widen(p);
  }
}

std::vector<ClassPrompt> sample_prompts() {
  return {
      {0, {"a", "video", "of", "a", "red", "square"}},
      {1, {"a", "video", "of", "a", "red", "circle"}},
      {2, {"a", "video", "of", "a", "green", "square"}},
      {3, {"a", "video", "of", "a", "blue", "ring", "moving", "left", "slow"}},
  };
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation catches bad geometry") {
  ModelConfig cfg = tiny_config();
  cfg.validate();
  cfg.frame_size = 9;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = tiny_config();
  cfg.num_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = tiny_config();
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = tiny_config();
  cfg.window = -1;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
}

TEST_CASE("config json round trip and shape compatibility rules") {
  ModelConfig cfg = tiny_config();
  ModelConfig back = model_config_from_json(model_config_to_json(cfg));
  CHECK(back.frame_size == cfg.frame_size);
  CHECK(back.temperature == cfg.temperature);

  // clip length and window may differ between image pretraining and video use
  ModelConfig video = cfg;
  video.frames_t = 8;
  video.window = 3;
  require_shape_compatible(cfg, video, "test");

  ModelConfig other = cfg;
  other.embed_dim = 16;
  CHECK_THROWS_AS(require_shape_compatible(cfg, other, "test"), InvariantError);
}

TEST_CASE("init_params is seed-deterministic with sane layer norms") {
  ModelConfig cfg = tiny_config();
  auto a = init_params(cfg, 42);
  auto b = init_params(cfg, 42);
  auto c = init_params(cfg, 43);
  CHECK(a.values == b.values);
  CHECK(a.values != c.values);

  for (float v : a.data("blocks.0.ln1.gain")) CHECK(v == 1.0f);
  for (float v : a.data("blocks.0.ln1.bias")) CHECK(v == 0.0f);
  for (float v : a.data("patch_proj.bias")) CHECK(v == 0.0f);
  CHECK(a.find("patch_proj.weight")->shape == std::vector<int64_t>{48, 8});
  CHECK(a.find("pos_embed")->shape == std::vector<int64_t>{5, 8});
}

TEST_CASE("frame_patches flattens patches in raster (y, x, c) order") {
  ModelConfig cfg;
  cfg.frame_size = 4;
  cfg.patch_size = 2;  // 2x2 grid of 2x2x3 patches
  cfg.frames_t = 1;
  cfg.embed_dim = 4;
  cfg.num_layers = 1;
  cfg.num_heads = 1;
  std::vector<float> frame(static_cast<size_t>(4 * 4 * 3));
  for (size_t i = 0; i < frame.size(); ++i) frame[i] = static_cast<float>(i) / 47.0f;

  auto patches = frame_patches<double>(cfg, frame.data());
  CHECK(patches.rows == 4);
  CHECK(patches.cols == 12);
  // patch (0,0) covers pixels (y,x) in {0,1}x{0,1}: offsets 0..5 then 12..17
  for (int j = 0; j < 6; ++j) {
    CHECK(patches.at(0, j) == doctest::Approx(frame[static_cast<size_t>(j)]));
    CHECK(patches.at(0, 6 + j) == doctest::Approx(frame[static_cast<size_t>(12 + j)]));
  }
  // patch (0,1) starts at pixel (0,2): offset 6
  CHECK(patches.at(1, 0) == doctest::Approx(frame[6]));
  // patch (1,0) starts at pixel (2,0): offset 24
  CHECK(patches.at(2, 0) == doctest::Approx(frame[24]));
}

TEST_CASE("windowed attention matches the scalar hand computation") {
  // one token per frame, one-dimensional embedding, so everything is scalar:
  // frame 0 attends over {x0, x1} with logits {x0*x0, x0*x1}
  const double a = 0.8, b = -0.3;
  TapeD tape;
  std::vector<TapeD::Node> toks{tape.leaf(MatD(1, 1, {a})), tape.leaf(MatD(1, 1, {b}))};
  auto out = windowed_attention<double>(tape, toks, toks, toks, 1, 1);

  const double e0 = std::exp(a * a), e1 = std::exp(a * b);
  const double want0 = (e0 * a + e1 * b) / (e0 + e1);
  const double f0 = std::exp(b * a), f1 = std::exp(b * b);
  const double want1 = (f0 * a + f1 * b) / (f0 + f1);
  CHECK(tape.value(out[0]).v[0] == doctest::Approx(want0).epsilon(1e-12));
  CHECK(tape.value(out[1]).v[0] == doctest::Approx(want1).epsilon(1e-12));

  // window 0 collapses to self-attention over each frame alone
  auto solo = windowed_attention<double>(tape, toks, toks, toks, 1, 0);
  CHECK(tape.value(solo[0]).v[0] == doctest::Approx(a).epsilon(1e-12));
  CHECK(tape.value(solo[1]).v[0] == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("window zero equals per-frame attention computed independently") {
  const int T = 3, S_tok = 4, d = 6;
  TapeD tape;
  std::vector<TapeD::Node> q, k, v;
  for (int t = 0; t < T; ++t) {
    q.push_back(tape.leaf(random_mat<double>(S_tok, d, 900 + static_cast<uint64_t>(t))));
    k.push_back(tape.leaf(random_mat<double>(S_tok, d, 910 + static_cast<uint64_t>(t))));
    v.push_back(tape.leaf(random_mat<double>(S_tok, d, 920 + static_cast<uint64_t>(t))));
  }
  auto joint = windowed_attention<double>(tape, q, k, v, 2, 0);
  for (int t = 0; t < T; ++t) {
    std::vector<TapeD::Node> q1{q[static_cast<size_t>(t)]};
    std::vector<TapeD::Node> k1{k[static_cast<size_t>(t)]};
    std::vector<TapeD::Node> v1{v[static_cast<size_t>(t)]};
    auto alone = windowed_attention<double>(tape, q1, k1, v1, 2, 0);
    CHECK(tape.value(joint[static_cast<size_t>(t)]).v == tape.value(alone[0]).v);  // bitwise
  }
}

TEST_CASE("windows wider than the clip saturate to full attention") {
  const int T = 4;
  TapeD tape;
  std::vector<TapeD::Node> q, k, v;
  for (int t = 0; t < T; ++t) {
    q.push_back(tape.leaf(random_mat<double>(3, 4, 930 + static_cast<uint64_t>(t))));
    k.push_back(tape.leaf(random_mat<double>(3, 4, 940 + static_cast<uint64_t>(t))));
    v.push_back(tape.leaf(random_mat<double>(3, 4, 950 + static_cast<uint64_t>(t))));
  }
  auto wide = windowed_attention<double>(tape, q, k, v, 1, T + 5);
  auto full = windowed_attention<double>(tape, q, k, v, 1, T - 1);
  for (int t = 0; t < T; ++t) {
    CHECK(tape.value(wide[static_cast<size_t>(t)]).v == tape.value(full[static_cast<size_t>(t)]).v);
  }
  CHECK_THROWS_AS(windowed_attention<double>(tape, q, k, v, 1, -1), UsageError);
  CHECK_THROWS_AS(windowed_attention<double>(tape, q, k, v, 3, 1), UsageError);
}

TEST_CASE("encoder rejects mismatched parameter tables with name lists") {
  ModelConfig cfg = tiny_config();
  Encoder<float> enc(cfg);
  auto theta = init_params(cfg, 1);

  ParamVector missing;
  for (const auto& e : theta.entries) {
    if (e.name == "proj.weight") continue;
    missing.add(e.name, e.shape);
  }
  missing.add("rogue.weight", {2, 2});
  Tape tape;
  try {
    enc.bind(tape, missing, false);
    FAIL("expected table mismatch");
  } catch (const InvariantError& err) {
    std::string msg = err.what();
    CHECK(msg.find("missing: [proj.weight]") != std::string::npos);
    CHECK(msg.find("unexpected: [rogue.weight]") != std::string::npos);
  }

  ParamVector wrong_shape;
  for (const auto& e : theta.entries) {
    if (e.name == "class_token") {
      wrong_shape.add(e.name, {cfg.embed_dim + 1});
    } else {
      wrong_shape.add(e.name, e.shape);
    }
  }
  Tape tape2;
  CHECK_THROWS_AS(enc.bind(tape2, wrong_shape, false), InvariantError);
}

TEST_CASE("encode is deterministic and sensitive to the window") {
  ModelConfig cfg = tiny_config();
  auto theta = init_params(cfg, 5);
  Encoder<float> enc(cfg);
  auto vs = random_videos(cfg, 3, 77);

  auto e1 = enc.encode_videos(vs, theta);
  auto e2 = enc.encode_videos(vs, theta);
  CHECK(e1 == e2);  // bitwise

  ModelConfig cfg0 = cfg;
  cfg0.window = 0;
  Encoder<float> enc0(cfg0);
  auto e0 = enc0.encode_videos(vs, theta);
  // moving content: temporal context must change the embedding
  bool differs = false;
  for (size_t i = 0; i < e0.size(); ++i) differs = differs || e0[i] != e1[i];
  CHECK(differs);
}

TEST_CASE("static clips: windowed encoding equals frame-by-frame encoding") {
  ModelConfig cfg = tiny_config();
  cfg.frames_t = 4;
  auto theta = init_params(cfg, 9);

  // double precision: agreement to near machine rounding
  Encoder<double> encd(cfg);
  auto vs = random_videos(cfg, 4, 123, /*static_frames=*/true);
  auto ed = params_as<double>(theta);
  auto video_emb = encd.encode_videos(vs, ed);
  auto image_emb = encd.encode_frames_imagewise(vs, ed);
  for (size_t i = 0; i < video_emb.size(); ++i) {
    CHECK(video_emb[i] == doctest::Approx(image_emb[i]).epsilon(1e-10));
  }

  // float: the documented 1e-5 coordinate tolerance
  Encoder<float> encf(cfg);
  auto vf = encf.encode_videos(vs, theta);
  auto iff = encf.encode_frames_imagewise(vs, theta);
  for (size_t i = 0; i < vf.size(); ++i) {
    CHECK(std::abs(vf[i] - iff[i]) <= 1e-5f * std::max(1.0f, std::abs(iff[i])));
  }

  // moving clips must NOT collapse to the frame-by-frame encoding
  auto moving = random_videos(cfg, 2, 321, /*static_frames=*/false);
  auto vm = encf.encode_videos(moving, theta);
  auto im = encf.encode_frames_imagewise(moving, theta);
  bool differs = false;
  for (size_t i = 0; i < vm.size(); ++i)

    differs = differs || std::abs(vm[i] - im[i]) > 1e-4f;
  CHECK(differs);
}

TEST_CASE("encode rejects geometry mismatches") {
  ModelConfig cfg = tiny_config();
  auto theta = init_params(cfg, 2);
  Encoder<float> enc(cfg);
  auto vs = random_videos(cfg, 1, 7);
  vs.t = 3;  // lie about the clip length
  vs.pixels.resize(static_cast<size_t>(vs.video_numel()));
  vs.class_ids = {0};
  CHECK_THROWS_AS(enc.encode_videos(vs, theta), UsageError);
}

TEST_CASE("backbone gradient matches finite differences") {
  ModelConfig cfg = tiny_config();
  auto theta = widen(init_params(cfg, 11));
  Encoder<double> enc(cfg);
  auto vs = random_videos(cfg, 1, 99);

  auto loss_of = [&](const ParamVectorD& p) {
    TapeD tape;
    auto bound = enc.bind(tape, p, false);
    auto emb = enc.video_embedding(tape, bound, vs.video(0), cfg.window);
    auto w = tape.constant(random_mat<double>(1, cfg.embed_dim, 424242));
    return static_cast<double>(tape.value(tape.sum_all(tape.mul(emb, w))).v[0]);
  };

  // tape gradient
  TapeD tape;
  auto bound = enc.bind(tape, theta, true);
  auto emb = enc.video_embedding(tape, bound, vs.video(0), cfg.window);
  auto w = tape.constant(random_mat<double>(1, cfg.embed_dim, 424242));
  auto loss = tape.sum_all(tape.mul(emb, w));
  tape.backward(loss);

  // flatten tape grads in entry order
  std::vector<double> g_tape;
  for (size_t i = 0; i < theta.entries.size(); ++i) {
    const auto& g = tape.gradient(bound.nodes[i]);
    g_tape.insert(g_tape.end(), g.v.begin(), g.v.end());
  }

  // sampled FD coordinates spread over all entries
  std::vector<int64_t> coords;
  Rng rng(31337);
  for (int i = 0; i < 80; ++i) coords.push_back(static_cast<int64_t>(rng.integer(static_cast<uint64_t>(theta.size()))));
  std::function<double(const ParamVectorD&)> f = loss_of;
  auto g_fd = finite_difference_gradient<double>(f, theta, 1e-5, coords);

  std::vector<double> g_sel;
  for (int64_t c : coords) g_sel.push_back(g_tape[static_cast<size_t>(c)]);
  double dev = max_rel_deviation(g_sel, g_fd, 1e-7);
  CHECK_MESSAGE(dev < 2e-5, "backbone grad vs finite differences, max rel dev = ", dev);
}

TEST_CASE("interpolated binding reproduces the weight-space interpolation") {
  ModelConfig cfg = tiny_config();
  auto theta_b = widen(init_params(cfg, 21));
  auto theta_a = widen(init_params(cfg, 22));
  const double alpha = 0.35;

  Encoder<double> enc(cfg);
  auto vs = random_videos(cfg, 1, 55);

  // graph route: bind theta_b, interpolate on-tape
  TapeD tape;
  auto base = enc.bind(tape, theta_b, false);
  auto mixed = enc.bind_interpolated(tape, base, theta_a, alpha);
  auto emb_graph = enc.video_embedding(tape, mixed, vs.video(0), cfg.window);

  // value route: interpolate in weight space, then encode
  auto theta_mix = interpolate(theta_a, theta_b, alpha);
  auto emb_value = enc.encode_videos(vs, theta_mix);

  for (int i = 0; i < cfg.embed_dim; ++i) {
    CHECK(tape.value(emb_graph).v[static_cast<size_t>(i)] ==
          doctest::Approx(emb_value[static_cast<size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("prompt bank: determinism, subsets, unit rows, errors") {
  auto prompts = sample_prompts();
  auto bank = ClassPromptBank::build(prompts, 16, 777);
  auto bank2 = ClassPromptBank::build(prompts, 16, 777);
  CHECK(bank.rows() == bank2.rows());
  CHECK(bank.size() == 4);

  for (int id : bank.ids()) {
    auto e = bank.embedding(id);
    double n = 0;
    for (float x : e) n += static_cast<double>(x) * x;
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
  }

  std::vector<int> keep{1, 3};
  auto sub = bank.subset(keep);
  CHECK(sub.size() == 2);
  auto full_row = bank.embedding(3);
  auto sub_row = sub.embedding(3);
  for (size_t i = 0; i < full_row.size(); ++i) CHECK(full_row[i] == sub_row[i]);  // bitwise

  CHECK_THROWS_AS(bank.embedding(99), UsageError);
  CHECK(bank.index_of(2) == 2);
  CHECK(bank.has(2));
  CHECK_FALSE(bank.has(42));
  std::vector<int> dup{1, 1};
  CHECK_THROWS_AS(bank.subset(dup), UsageError);

  auto clash = prompts;
  clash[1].tokens = clash[0].tokens;
  CHECK_THROWS_AS(ClassPromptBank::build(clash, 16, 777), InvariantError);
  CHECK_THROWS_AS(ClassPromptBank::build({}, 16, 7), UsageError);
}

TEST_CASE("prompts sharing attribute tokens are closer than disjoint ones") {
  auto bank = ClassPromptBank::build(sample_prompts(), 32, 2024);
  auto sim_of = [&](int a, int b) {
    return similarity<float>(bank.embedding(a), bank.embedding(b));
  };
  // 0 and 1 share five of six tokens; 0 and 3 share only the template
  CHECK(sim_of(0, 1) > sim_of(0, 3));
  CHECK(sim_of(0, 2) > sim_of(0, 3));
}

TEST_CASE("similarity closed forms") {
  std::vector<double> a{1.0, 0.0}, b{0.0, 2.0}, c{3.0, 0.0}, z{0.0, 0.0};
  CHECK(similarity<double>(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(similarity<double>(a, b) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(similarity<double>(a, c) == doctest::Approx(1.0).epsilon(1e-12));  // scale invariant
  std::vector<double> na{-1.0, 0.0};
  CHECK(similarity<double>(a, na) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_THROWS_AS(similarity<double>(a, z), InvariantError);
  std::vector<double> short_vec{1.0};
  CHECK_THROWS_AS(similarity<double>(a, short_vec), UsageError);
}

}  // TEST_SUITE
