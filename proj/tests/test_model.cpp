#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "vlbm/env.hpp"
#include "vlbm/model.hpp"
#include "vlbm/optim.hpp"

using namespace vlbm;

namespace {

ModelConfig tiny_config(int branches, int state_dim = 2, int action_dim = 1) {
  ModelConfig cfg;
  cfg.state_dim = state_dim;
  cfg.action_dim = action_dim;
  cfg.latent_dim = 3;
  cfg.rnn_dim = 4;
  cfg.branches = branches;
  cfg.mlp_hidden = {5};
  cfg.c1 = 0.1;
  cfg.c2 = 0.1;
  return cfg;
}

VLBMParams zeroed_vlbm(const ModelConfig& cfg) {
  VLBMParams m = make_vlbm(cfg, 0);
  for_each_param(m, [](const std::string& name, Tensor& t) {
    if (name == "gate.v") return;
    for (int i = 0; i < t.size(); ++i) t[i] = 0.0;
  });
  return m;
}

void set_unit_variances(VLBMParams& m) {
  double b = std::log(std::exp(1.0) - 1.0);  // softplus inverse of 1
  m.enc.init_head.var_mlp.b.back() = Tensor({m.cfg.latent_dim}, b);
  m.enc.post.var_mlp.b.back() = Tensor({m.cfg.latent_dim}, b);
  for (BranchParams& br : m.branches) {
    br.trans.var_mlp.b.back() = Tensor({m.cfg.latent_dim}, b);
    br.state.var_mlp.b.back() = Tensor({m.cfg.state_dim}, b);
    br.reward.var_mlp.b.back() = Tensor({1}, b);
  }
}

Trajectory random_traj(int T, int state_dim, int action_dim, std::uint64_t seed) {
  RNGStream rng(seed);
  Trajectory tr;
  tr.states.push_back(rng.normal_vec(state_dim));
  for (int t = 0; t < T; ++t) {
    tr.actions.push_back(rng.normal_vec(action_dim));
    tr.rewards.push_back(rng.normal());
    tr.states.push_back(rng.normal_vec(state_dim));
  }
  return tr;
}

}  // namespace

TEST_CASE("branch weights") {
  SECTION("symmetric gate splits evenly") {
    BranchGate g{Tensor::vec({1, 1}), 1e-8};
    std::vector<double> w = branch_weights(g);
    CHECK_THAT(w[0], Catch::Matchers::WithinAbs(0.5, 1e-8));
    CHECK_THAT(w[1], Catch::Matchers::WithinAbs(0.5, 1e-8));
  }
  SECTION("one-hot gate") {
    BranchGate g{Tensor::vec({1, 0, 0}), 1e-8};
    std::vector<double> w = branch_weights(g);
    CHECK_THAT(w[0], Catch::Matchers::WithinAbs(1.0, 1e-7));
    CHECK(w[1] == 0.0);
    CHECK(w[2] == 0.0);
  }
  SECTION("large eps case by direct substitution") {
    BranchGate g{Tensor::vec({2, 1}), 1.0};
    std::vector<double> w = branch_weights(g);
    CHECK_THAT(w[0], Catch::Matchers::WithinAbs(4.0 / 6.0, 1e-12));
    CHECK_THAT(w[1], Catch::Matchers::WithinAbs(1.0 / 6.0, 1e-12));
  }
  SECTION("weight sum identity and argmax preservation") {
    RNGStream rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      BranchGate g{rng.normal_vec(5), 1e-8};
      std::vector<double> w = branch_weights(g);
      double vsum = 0;
      for (int b = 0; b < 5; ++b) vsum += g.v[b] * g.v[b];
      double wsum = 0;
      int wmax = 0, vmax = 0;
      for (int b = 0; b < 5; ++b) {
        CHECK(w[b] >= 0.0);
        wsum += w[b];
        if (w[b] > w[wmax]) wmax = b;
        if (g.v[b] * g.v[b] > g.v[vmax] * g.v[vmax]) vmax = b;
      }
      CHECK_THAT(wsum, Catch::Matchers::WithinAbs(vsum / (1e-8 + vsum), 1e-12));
      CHECK(wmax == vmax);
    }
  }
  SECTION("tape version matches the plain version") {
    RNGStream rng(14);
    Tensor v = rng.normal_vec(4);
    Tape tape;
    std::vector<Ref> wr = branch_weights_refs(tape, tape.leaf(v), 1e-8);
    std::vector<double> w = branch_weights(BranchGate{v, 1e-8});
    for (int b = 0; b < 4; ++b)
      CHECK_THAT(tape.value(wr[b])[0], Catch::Matchers::WithinAbs(w[b], 1e-12));
  }
  SECTION("eps must be positive") {
    BranchGate g{Tensor::vec({1.0}), 0.0};
    CHECK_THROWS_AS(branch_weights(g), std::invalid_argument);
  }
}

TEST_CASE("gaussian mixing") {
  SECTION("single branch is the identity") {
    DiagGaussian h{Tensor::vec({1, 2}), Tensor::vec({3, 4})};
    DiagGaussian m = mix_gaussian({h}, {1.0});
    CHECK(m.mean.values() == h.mean.values());
    CHECK(m.var_diag.values() == h.var_diag.values());
  }
  SECTION("even two-branch mix") {
    DiagGaussian a{Tensor::vec({0.0}), Tensor::vec({1.0})};
    DiagGaussian b{Tensor::vec({2.0}), Tensor::vec({1.0})};
    DiagGaussian m = mix_gaussian({a, b}, {0.5, 0.5});
    CHECK(m.mean[0] == 1.0);
    CHECK(m.var_diag[0] == 0.5);
  }
  SECTION("one-hot weights select a branch exactly") {
    DiagGaussian a{Tensor::vec({0.7}), Tensor::vec({0.2})};
    DiagGaussian b{Tensor::vec({-3.0}), Tensor::vec({9.0})};
    DiagGaussian m = mix_gaussian({a, b, b}, {1.0, 0.0, 0.0});
    CHECK(m.mean[0] == 0.7);
    CHECK(m.var_diag[0] == 0.2);
  }
  SECTION("dim mismatch rejected") {
    DiagGaussian a{Tensor::vec({1.0}), Tensor::vec({1.0})};
    DiagGaussian b{Tensor::vec({1.0, 2.0}), Tensor::vec({1.0, 1.0})};
    CHECK_THROWS_AS(mix_gaussian({a, b}, {0.5, 0.5}), std::invalid_argument);
  }
  SECTION("tape version matches the plain version") {
    RNGStream rng(6);
    std::vector<DiagGaussian> heads;
    std::vector<double> w{0.3, 0.1, 0.6};
    Tape tape;
    std::vector<DiagGaussianRef> refs;
    std::vector<Ref> wr;
    for (int b = 0; b < 3; ++b) {
      Tensor var({2});
      for (int i = 0; i < 2; ++i) var[i] = 0.1 + std::abs(rng.normal());
      heads.push_back({rng.normal_vec(2), var});
      refs.push_back({tape.constant(heads[b].mean), tape.constant(heads[b].var_diag)});
      wr.push_back(tape.constant(w[b]));
    }
    DiagGaussian plain = mix_gaussian(heads, w);
    DiagGaussianRef taped = mix_gaussian(tape, refs, wr);
    for (int i = 0; i < 2; ++i) {
      CHECK_THAT(tape.value(taped.mean)[i], Catch::Matchers::WithinAbs(plain.mean[i], 1e-12));
      CHECK_THAT(tape.value(taped.var_diag)[i], Catch::Matchers::WithinAbs(plain.var_diag[i], 1e-12));
    }
  }
}

TEST_CASE("bernoulli mixing") {
  CHECK(mix_bernoulli({0.3}, {1.0}) == 0.3);
  CHECK_THAT(mix_bernoulli({0.2, 0.6}, {0.5, 0.5}), Catch::Matchers::WithinAbs(0.4, 1e-12));
  CHECK(mix_bernoulli({0.9, 0.1}, {1.0, 0.0}) == 0.9);
  CHECK(mix_bernoulli({0.0, 0.0}, {0.5, 0.5}) >= kBernoulliClip);
  CHECK_THROWS_AS(mix_bernoulli({0.5}, {0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("pairwise alignment loss") {
  SECTION("identical sequences give zero") {
    Tape tape;
    RNGStream rng(3);
    std::vector<Ref> a, b;
    for (int t = 0; t < 3; ++t) {
      Tensor v = rng.normal_vec(4);
      a.push_back(tape.constant(v));
      b.push_back(tape.constant(v));
    }
    CHECK(std::abs(tape.value(rsa(tape, a, b))[0]) < 1e-12);
  }
  SECTION("common additive shift cancels") {
    Tape tape;
    RNGStream rng(4);
    std::vector<Ref> a, b;
    for (int t = 0; t < 3; ++t) {
      Tensor v = rng.normal_vec(4);
      Tensor shifted = v;
      for (int i = 0; i < 4; ++i) shifted[i] += 2.5;
      a.push_back(tape.constant(shifted));
      b.push_back(tape.constant(v));
    }
    CHECK(std::abs(tape.value(rsa(tape, a, b))[0]) < 1e-12);
  }
  SECTION("two-element hand case is exactly one") {
    Tape tape;
    std::vector<Ref> ht{tape.constant(Tensor::vec({0, 1}))};
    std::vector<Ref> h{tape.constant(Tensor::vec({0, 0}))};
    CHECK(tape.value(rsa(tape, ht, h))[0] == 1.0);
  }
  SECTION("mse variant on the same hand case") {
    Tape tape;
    std::vector<Ref> ht{tape.constant(Tensor::vec({0, 1}))};
    std::vector<Ref> h{tape.constant(Tensor::vec({0, 0}))};
    CHECK(tape.value(rsa(tape, ht, h, true))[0] == 0.5);
    // a shift no longer cancels under plain mse
    std::vector<Ref> shifted{tape.constant(Tensor::vec({1, 1}))};
    CHECK(tape.value(rsa(tape, shifted, h, true))[0] == 1.0);
    CHECK(std::abs(tape.value(rsa(tape, shifted, h, false))[0]) < 1e-12);
  }
  SECTION("symmetric under simultaneous coordinate permutation") {
    Tape tape;
    RNGStream rng(5);
    Tensor a = rng.normal_vec(4), b = rng.normal_vec(4);
    Tensor ap({4}), bp({4});
    int perm[4] = {2, 0, 3, 1};
    for (int i = 0; i < 4; ++i) {
      ap[i] = a[perm[i]];
      bp[i] = b[perm[i]];
    }
    double base = tape.value(rsa(tape, {tape.constant(a)}, {tape.constant(b)}))[0];
    double permuted = tape.value(rsa(tape, {tape.constant(ap)}, {tape.constant(bp)}))[0];
    CHECK_THAT(permuted, Catch::Matchers::WithinAbs(base, 1e-10));
    CHECK(base > 0.0);
  }
  SECTION("averages over timesteps") {
    Tape tape;
    Ref ht = tape.constant(Tensor::vec({0, 1}));
    Ref h = tape.constant(Tensor::vec({0, 0}));
    CHECK_THAT(tape.value(rsa(tape, {ht, ht}, {h, h}))[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("width below two rejected for the pairwise form") {
    Tape tape;
    std::vector<Ref> a{tape.constant(Tensor::vec({1.0}))};
    CHECK_THROWS_AS(rsa(tape, a, a), std::invalid_argument);
    CHECK(tape.value(rsa(tape, a, a, true))[0] == 0.0);  // mse variant has no pair requirement
  }
  SECTION("length mismatch rejected") {
    Tape tape;
    std::vector<Ref> a{tape.constant(Tensor::vec({1, 2}))};
    std::vector<Ref> b;
    CHECK_THROWS_AS(rsa(tape, a, b), std::invalid_argument);
  }
}

TEST_CASE("encoder pass") {
  ModelConfig cfg = tiny_config(1);
  VLBMParams m = make_vlbm(cfg, 42);
  SECTION("degenerate single-state trajectory") {
    Trajectory tr = random_traj(0, 2, 1, 1);
    Tape tape;
    EncodedTrajRefs e = encode(tape, bind(tape, m.enc), tr, nullptr);
    CHECK(e.z.size() == 1);
    CHECK(e.h.empty());
    CHECK(e.heads.size() == 1);
  }
  SECTION("zero noise gives posterior means") {
    Trajectory tr = random_traj(3, 2, 1, 2);
    Tape tape;
    EncodedTrajRefs e = encode(tape, bind(tape, m.enc), tr, nullptr);
    REQUIRE(e.z.size() == 4);
    for (size_t t = 0; t < e.z.size(); ++t)
      for (int i = 0; i < cfg.latent_dim; ++i)
        CHECK_THAT(tape.value(e.z[t])[i],
                   Catch::Matchers::WithinAbs(tape.value(e.heads[t].mean)[i], 1e-12));
  }
  SECTION("same seed gives identical encodings") {
    Trajectory tr = random_traj(3, 2, 1, 2);
    auto run = [&]() {
      Tape tape;
      RNGStream noise(91);
      EncodedTrajRefs e = encode(tape, bind(tape, m.enc), tr, &noise);
      std::vector<double> flat;
      for (Ref z : e.z)
        for (int i = 0; i < cfg.latent_dim; ++i) flat.push_back(tape.value(z)[i]);
      return flat;
    };
    CHECK(run() == run());
  }
}

TEST_CASE("branch decode step") {
  ModelConfig cfg = tiny_config(1);
  SECTION("zero-weight branch heads") {
    VLBMParams m = zeroed_vlbm(cfg);
    Tape tape;
    BoundBranch br = bind(tape, m.branches[0]);
    DecodedStepRefs step = decode_step(tape, br, tape.constant(Tensor({4})), tape.constant(Tensor({4})),
                                       tape.constant(Tensor({3})), tape.constant(Tensor({1})),
                                       Tensor({3}), true);
    CHECK(tape.value(step.h_tilde).size() == 4);  // shares the recurrent width
    for (int i = 0; i < 2; ++i) {
      CHECK(tape.value(step.state.mean)[i] == 0.0);
      CHECK_THAT(tape.value(step.state.var_diag)[i], Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
    }
    CHECK(tape.value(step.term_mean)[0] == 0.5);
  }
  SECTION("zero decode noise gives the transition mean") {
    VLBMParams m = make_vlbm(cfg, 10);
    Tape tape;
    BoundBranch br = bind(tape, m.branches[0]);
    RNGStream rng(2);
    DecodedStepRefs step = decode_step(tape, br, tape.constant(rng.normal_vec(4)),
                                       tape.constant(rng.normal_vec(4)), tape.constant(rng.normal_vec(3)),
                                       tape.constant(rng.normal_vec(1)), Tensor({3}), false);
    for (int i = 0; i < 3; ++i)
      CHECK_THAT(tape.value(step.z)[i], Catch::Matchers::WithinAbs(tape.value(step.trans.mean)[i], 1e-12));
  }
}

TEST_CASE("single-branch evidence bound") {
  SECTION("rigged degenerate trajectory has closed form") {
    ModelConfig cfg = tiny_config(1, 1, 1);
    VLBMParams m = zeroed_vlbm(cfg);
    set_unit_variances(m);
    Trajectory tr;
    tr.states.push_back(Tensor({1}));  // s_0 = 0
    Tape tape;
    BoundVLBM bm = bind(tape, m);
    double obj = tape.value(model_objective(tape, bm, tr, nullptr, cfg, ObjectiveKind::Elbo))[0];
    // log N(0; 0, 1) - KL(N(0,1) || N(0,1))
    CHECK_THAT(obj, Catch::Matchers::WithinAbs(-0.5 * std::log(kTwoPi), 1e-6));
  }
  SECTION("bound never exceeds the reconstruction sum") {
    ModelConfig cfg = tiny_config(1);
    VLBMParams m = make_vlbm(cfg, 3);
    Trajectory tr = random_traj(4, 2, 1, 7);
    Tape tape;
    BoundVLBM bm = bind(tape, m);
    EncodedTrajRefs enc = encode(tape, bm.enc, tr, nullptr);
    BranchPassRefs pass = branch_teacher_pass(tape, bm.branches[0], enc, tr, nullptr, cfg);
    double bound = tape.value(elbo(tape, bm.branches[0], enc, pass, tr, cfg))[0];
    Ref recon = gaussian_log_prob(tape, gaussian_head(tape, bm.branches[0].state, enc.z[0]), tr.states[0]);
    for (int t = 1; t <= tr.steps(); ++t) {
      recon = tape.add(recon, gaussian_log_prob(tape, gaussian_head(tape, bm.branches[0].state, enc.z[t]),
                                                tr.states[t]));
      recon = tape.add(recon, gaussian_log_prob(tape, gaussian_head(tape, bm.branches[0].reward, enc.z[t]),
                                                Tensor::scalar(tr.rewards[t - 1])));
    }
    CHECK(bound <= tape.value(recon)[0] + 1e-10);
  }
  SECTION("zero-weight model makes the alignment term vanish") {
    ModelConfig cfg = tiny_config(1);
    VLBMParams m = zeroed_vlbm(cfg);
    Trajectory tr = random_traj(3, 2, 1, 9);
    auto value = [&](ObjectiveKind kind) {
      Tape tape;
      BoundVLBM bm = bind(tape, m);
      return tape.value(model_objective(tape, bm, tr, nullptr, cfg, kind))[0];
    };
    double base = value(ObjectiveKind::Elbo);
    CHECK_THAT(value(ObjectiveKind::ElboRsa), Catch::Matchers::WithinAbs(base, 1e-10));
    CHECK_THAT(value(ObjectiveKind::ElboRsaMse), Catch::Matchers::WithinAbs(base, 1e-10));
  }
  SECTION("non-branching objectives require a single branch") {
    ModelConfig cfg = tiny_config(2);
    VLBMParams m = make_vlbm(cfg, 1);
    Trajectory tr = random_traj(2, 2, 1, 5);
    Tape tape;
    BoundVLBM bm = bind(tape, m);
    CHECK_THROWS_AS(model_objective(tape, bm, tr, nullptr, cfg, ObjectiveKind::Elbo),
                    std::invalid_argument);
  }
}

namespace {

double objective_value(VLBMParams& m, const Trajectory& tr, ObjectiveKind kind, std::uint64_t noise_seed) {
  Tape tape;
  BoundVLBM bm = bind(tape, m);
  RNGStream noise(noise_seed);
  return tape.value(model_objective(tape, bm, tr, &noise, m.cfg, kind))[0];
}

void gradient_check(VLBMParams& m, const Trajectory& tr, ObjectiveKind kind) {
  const std::uint64_t noise_seed = 55;
  Tape tape;
  BoundVLBM bm = bind(tape, m);
  RNGStream noise(noise_seed);
  Ref obj = model_objective(tape, bm, tr, &noise, m.cfg, kind);
  GradMap gm = tape.backward(tape.mul(tape.constant(-1.0), obj));

  std::vector<Tensor*> params;
  std::vector<std::string> names;
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    params.push_back(&t);
    names.push_back(name);
  });
  auto f = [&]() { return -objective_value(m, tr, kind, noise_seed); };
  std::vector<Tensor> fd = finite_diff(f, params, 1e-5);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor g = gm.get(bm.leaves[i], params[i]->shape());
    for (int j = 0; j < g.size(); ++j) {
      INFO(names[i] << "[" << j << "]");
      CHECK_THAT(g[j], Catch::Matchers::WithinAbs(fd[i][j], 1e-6 + 1e-4 * std::abs(fd[i][j])));
    }
  }
}

}  // namespace

TEST_CASE("objective gradients match finite differences") {
  Trajectory tr = random_traj(3, 2, 1, 70);
  SECTION("branched objective, two branches") {
    ModelConfig cfg = tiny_config(2);
    VLBMParams m = make_vlbm(cfg, 21);
    gradient_check(m, tr, ObjectiveKind::Branching);
  }
  SECTION("single-branch objective with alignment") {
    ModelConfig cfg = tiny_config(1);
    VLBMParams m = make_vlbm(cfg, 22);
    gradient_check(m, tr, ObjectiveKind::ElboRsa);
  }
  SECTION("branched objective with termination heads") {
    ModelConfig cfg = tiny_config(2);
    cfg.model_termination = true;
    VLBMParams m = make_vlbm(cfg, 23);
    Trajectory term_tr = tr;
    term_tr.terminated = true;
    gradient_check(m, term_tr, ObjectiveKind::Branching);
  }
}

TEST_CASE("training loop") {
  ModelConfig cfg = tiny_config(2);
  EnvSpec spec = make_env(EnvKind::LineMass);
  spec.horizon = 8;
  Dataset ds = collect_dataset(spec, make_behavior_policy(spec), 4, 33);
  SECTION("zero iterations leave parameters untouched") {
    VLBMParams m = make_vlbm(cfg, 5);
    VLBMParams before = m;
    TrainConfig tc;
    tc.max_iter = 0;
    train(m, ds, tc, ObjectiveKind::Branching);
    for_each_param(m, [&](const std::string& name, Tensor& t) {
      for_each_param(before, [&](const std::string& name2, Tensor& t2) {
        if (name == name2) CHECK(t.values() == t2.values());
      });
    });
  }
  SECTION("log length equals iteration count and runs are reproducible") {
    auto run = [&]() {
      VLBMParams m = make_vlbm(cfg, 5);
      TrainConfig tc;
      tc.max_iter = 4;
      tc.batch = 2;
      tc.lr = 1e-3;
      tc.seed = 17;
      std::vector<TrainLogEntry> log = train(m, ds, tc, ObjectiveKind::Branching);
      std::vector<double> flat;
      for (const TrainLogEntry& e : log) flat.push_back(e.objective);
      for_each_param(m, [&](const std::string&, Tensor& t) {
        for (int i = 0; i < t.size(); ++i) flat.push_back(t[i]);
      });
      return std::pair{log.size(), flat};
    };
    auto [n1, f1] = run();
    auto [n2, f2] = run();
    CHECK(n1 == 4);
    CHECK(f1 == f2);
  }
  SECTION("empty dataset rejected") {
    VLBMParams m = make_vlbm(cfg, 5);
    Dataset empty;
    TrainConfig tc;
    CHECK_THROWS_AS(train(m, empty, tc, ObjectiveKind::Branching), std::invalid_argument);
  }
}

TEST_CASE("evaluation rollout") {
  SECTION("rigged deterministic unit reward accumulates the geometric sum") {
    ModelConfig cfg = tiny_config(1);
    VLBMParams m = zeroed_vlbm(cfg);
    // deterministic heads: means fixed, variances pushed to (near) zero
    for (BranchParams& br : m.branches) {
      br.reward.mean_mlp.b.back() = Tensor({1}, 1.0);
      br.reward.var_mlp.b.back() = Tensor({1}, -40.0);
      br.state.var_mlp.b.back() = Tensor({2}, -40.0);
      br.trans.var_mlp.b.back() = Tensor({3}, -40.0);
    }
    LinearGaussianPolicy pi{Tensor({1, 2}), Tensor({1}), 0.0, "still"};
    RNGStream rng(1);
    RolloutResult res = rollout(m, pi, 3, 0.5, 2, rng);
    CHECK_THAT(res.estimate, Catch::Matchers::WithinAbs(1.75, 1e-2));
    CHECK(res.per_episode.size() == 2);
    RNGStream rng2(2);
    RolloutResult res0 = rollout(m, pi, 3, 0.0, 1, rng2);
    CHECK_THAT(res0.estimate, Catch::Matchers::WithinAbs(1.0, 1e-2));
  }
  SECTION("termination head rigged to fire stops after one step") {
    ModelConfig cfg = tiny_config(1);
    cfg.model_termination = true;
    VLBMParams m = zeroed_vlbm(cfg);
    for (BranchParams& br : m.branches) {
      br.reward.mean_mlp.b.back() = Tensor({1}, 1.0);
      br.reward.var_mlp.b.back() = Tensor({1}, -40.0);
      br.state.var_mlp.b.back() = Tensor({2}, -40.0);
      br.trans.var_mlp.b.back() = Tensor({3}, -40.0);
      br.term.b.back() = Tensor({1}, 40.0);  // sigmoid saturates at 1
    }
    LinearGaussianPolicy pi{Tensor({1, 2}), Tensor({1}), 0.0, "still"};
    RNGStream rng(3);
    RolloutResult res = rollout(m, pi, 10, 0.5, 3, rng);
    CHECK_THAT(res.estimate, Catch::Matchers::WithinAbs(1.0, 1e-2));
    CHECK(res.mean_episode_length == 1.0);
  }
  SECTION("fixed seed reproduces per-episode returns") {
    ModelConfig cfg = tiny_config(3);
    VLBMParams m = make_vlbm(cfg, 77);
    LinearGaussianPolicy pi{Tensor({1, 2}, {0.3, -0.1}), Tensor({1}), 0.1, "p"};
    RNGStream a(5), b(5);
    RolloutResult r1 = rollout(m, pi, 6, 0.9, 4, a);
    RolloutResult r2 = rollout(m, pi, 6, 0.9, 4, b);
    CHECK(r1.per_episode == r2.per_episode);
  }
  SECTION("estimate is the mean of the per-episode returns") {
    ModelConfig cfg = tiny_config(2);
    VLBMParams m = make_vlbm(cfg, 12);
    LinearGaussianPolicy pi{Tensor({1, 2}), Tensor({1}), 0.0, "still"};
    RNGStream rng(8);
    RolloutResult res = rollout(m, pi, 4, 0.9, 5, rng);
    REQUIRE(res.per_episode.size() == 5);
    double mean = 0;
    for (double r : res.per_episode) mean += r;
    CHECK_THAT(res.estimate, Catch::Matchers::WithinAbs(mean / 5, 1e-12));
  }
  SECTION("domain errors") {
    ModelConfig cfg = tiny_config(1);
    VLBMParams m = make_vlbm(cfg, 1);
    LinearGaussianPolicy pi{Tensor({1, 2}), Tensor({1}), 0.0, "p"};
    RNGStream rng(1);
    CHECK_THROWS_AS(rollout(m, pi, 3, 1.0, 1, rng), std::invalid_argument);
    CHECK_THROWS_AS(rollout(m, pi, 3, 0.9, 0, rng), std::invalid_argument);
    LinearGaussianPolicy wide{Tensor({1, 5}), Tensor({1}), 0.0, "p"};
    CHECK_THROWS_AS(rollout(m, wide, 3, 0.9, 1, rng), std::invalid_argument);
  }
}

TEST_CASE("latent export") {
  ModelConfig cfg = tiny_config(1);
  VLBMParams m = make_vlbm(cfg, 2);
  SECTION("empty input writes only the header") {
    std::ostringstream os;
    export_latents(m, {}, os);
    CHECK(os.str() == "policy_id,t,z_0,z_1,z_2\n");
  }
  SECTION("one trajectory yields T+1 rows and reruns are identical") {
    Trajectory tr = random_traj(4, 2, 1, 6);
    std::ostringstream a, b;
    export_latents(m, {{"pol", tr}}, a);
    export_latents(m, {{"pol", tr}}, b);
    CHECK(a.str() == b.str());
    int rows = 0;
    for (char c : a.str())
      if (c == '\n') ++rows;
    CHECK(rows == 6);  // header + 5 latents
    CHECK(a.str().find("pol,0,") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip") {
  ModelConfig cfg = tiny_config(2);
  cfg.model_termination = true;
  VLBMParams m = make_vlbm(cfg, 19);
  std::string path = (std::filesystem::temp_directory_path() / "ckpt.json").string();
  save_checkpoint(m, "vlbm", 19, path);
  std::string kind;
  VLBMParams back = load_checkpoint(path, &kind);
  CHECK(kind == "vlbm");
  CHECK(back.cfg.branches == 2);
  CHECK(back.cfg.model_termination);
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    for_each_param(back, [&](const std::string& name2, Tensor& t2) {
      if (name == name2) CHECK(t.values() == t2.values());
    });
  });
  std::remove(path.c_str());
  CHECK_THROWS(load_checkpoint(path));
}
