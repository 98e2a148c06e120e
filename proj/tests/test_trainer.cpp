#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "dreamdiff/trainer.hpp"

using namespace dreamdiff;

namespace {

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.hist_len = 2;
    cfg.pred_len = 4;
    cfg.horizon = 8;
    cfg.point_count = 16;
    cfg.enc_hidden = 8;
    cfg.point_feat = 4;
    cfg.proprio_feat = 4;
    cfg.policy_widths = {8};
    cfg.wm_widths = {8};
    cfg.emb_dim = 8;
    cfg.diffusion_steps = 10;
    cfg.beta_lo = 2e-3;
    cfg.beta_hi = 0.2;
    cfg.epochs = 2;
    cfg.steps_per_epoch = 2;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    return cfg;
}

DemoDataset small_push_dataset(int demos, uint64_t seed) {
    return collect_dataset(TaskSpec::push(), demos, seed, 16, 2, 4, 8, nullptr);
}

// exact-noise oracle for the policy loss: recovers eps from the noisy plan
// and the known clean actions of the batch, in call order
PolicyDenoiseFn policy_oracle(const std::vector<TrainWindow>& batch, const NormStats& stats,
                              const NoiseSchedule& sched, int H, int A, std::shared_ptr<int> counter) {
    return [&batch, &stats, &sched, H, A, counter](const Tensor& noisy, int k, const Tensor&) {
        const TrainWindow& w = batch[static_cast<size_t>((*counter)++)];
        Tensor x0 = stats.normalize_actions(w.actions, H, A);
        scalar sa = std::sqrt(sched.a_bar(k)), sb = std::sqrt(scalar(1) - sched.a_bar(k));
        std::vector<scalar> eps(noisy.size());
        for (size_t i = 0; i < eps.size(); ++i) eps[i] = (noisy.at(i) - sa * x0.at(i)) / sb;
        return Tensor::leaf(noisy.shape(), std::move(eps));
    };
}

WmDenoiseFn wm_oracle(const std::vector<TrainWindow>& batch, const SharedEncoder& enc, const NormStats& stats,
                      const NoiseSchedule& sched, int M, int N, std::shared_ptr<int> counter) {
    return [&batch, &enc, &stats, &sched, M, N, counter](const Tensor& noisy, int k, const Tensor&, const Tensor&) {
        const TrainWindow& w = batch[static_cast<size_t>((*counter)++)];
        NoGrad ng;
        std::vector<Tensor> rows;
        for (int j = M; j < M + N; ++j) {
            const DemoFrame* f = w.frames[static_cast<size_t>(j)];
            rows.push_back(enc.encode(stats.normalize_points(f->points, enc.config().point_count,
                                                             enc.config().point_channels),
                                      stats.normalize_proprio(f->proprio)));
        }
        Tensor x0 = stack_rows(rows);
        scalar sa = std::sqrt(sched.a_bar(k)), sb = std::sqrt(scalar(1) - sched.a_bar(k));
        std::vector<scalar> eps(noisy.size());
        for (size_t i = 0; i < eps.size(); ++i) eps[i] = (noisy.at(i) - sa * x0.at(i)) / sb;
        return Tensor::leaf(noisy.shape(), std::move(eps));
    };
}

}  // namespace

TEST_CASE("oracle denoisers drive both losses to zero") {
    DemoDataset ds = small_push_dataset(3, 700);
    TrainConfig cfg = tiny_config();
    Trainer tr(ds, cfg);
    ModelBundle& b = tr.bundle();
    WindowSampler sampler(ds, cfg.hist_len, cfg.pred_len, cfg.horizon, false);
    Rng rng(4);
    std::vector<TrainWindow> batch;
    for (int i = 0; i < 6; ++i) batch.push_back(sampler.sample(rng));

    LossContext ctx{&b.encoder, &b.stats, &b.sched, cfg.hist_len, cfg.pred_len, cfg.horizon, 3, false};
    auto c1 = std::make_shared<int>(0);
    auto c2 = std::make_shared<int>(0);
    PolicyDenoiseFn pol = policy_oracle(batch, b.stats, b.sched, cfg.horizon, 3, c1);
    WmDenoiseFn wm = wm_oracle(batch, b.encoder, b.stats, b.sched, cfg.hist_len, cfg.pred_len, c2);
    Rng loss_rng(9);
    BatchLosses losses = compute_losses(batch, ctx, pol, &wm, loss_rng);
    CHECK(losses.bc.item() < 1e-20);
    REQUIRE(losses.has_wm);
    CHECK(losses.wm.item() < 1e-20);
}

TEST_CASE("zero-predicting denoisers give unit loss per element") {
    DemoDataset ds = small_push_dataset(3, 710);
    TrainConfig cfg = tiny_config();
    Trainer tr(ds, cfg);
    ModelBundle& b = tr.bundle();
    WindowSampler sampler(ds, cfg.hist_len, cfg.pred_len, cfg.horizon, false);
    Rng rng(11);
    std::vector<TrainWindow> batch;
    for (int i = 0; i < 850; ++i) batch.push_back(sampler.sample(rng));  // ~2e4 noise draws

    LossContext ctx{&b.encoder, &b.stats, &b.sched, cfg.hist_len, cfg.pred_len, cfg.horizon, 3, false};
    PolicyDenoiseFn pol = [](const Tensor& noisy, int, const Tensor&) { return Tensor::zeros(noisy.shape()); };
    WmDenoiseFn wm = [](const Tensor& noisy, int, const Tensor&, const Tensor&) {
        return Tensor::zeros(noisy.shape());
    };
    Rng loss_rng(13);
    BatchLosses losses = compute_losses(batch, ctx, pol, &wm, loss_rng);
    CHECK(std::abs(losses.bc.item() - 1.0) < 0.05);
    CHECK(std::abs(losses.wm.item() - 1.0) < 0.05);
}

TEST_CASE("lambda zero reduces the total to the BC loss with zero world-model gradients") {
    DemoDataset ds = small_push_dataset(3, 720);
    TrainConfig cfg = tiny_config();
    cfg.lambda = 0.0;
    Trainer tr(ds, cfg);
    ModelBundle& b = tr.bundle();
    WindowSampler sampler(ds, cfg.hist_len, cfg.pred_len, cfg.horizon, false);
    Rng rng(3);
    std::vector<TrainWindow> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(sampler.sample(rng));
    LossContext ctx{&b.encoder, &b.stats, &b.sched, cfg.hist_len, cfg.pred_len, cfg.horizon, 3, false};
    PolicyDenoiseFn pol = [&](const Tensor& noisy, int k, const Tensor& hist) {
        return b.policy.denoise(noisy, k, hist);
    };
    Rng loss_rng(5);
    BatchLosses losses = compute_losses(batch, ctx, pol, nullptr, loss_rng);
    CHECK_FALSE(losses.has_wm);
    auto stores = b.stores();
    backward(losses.bc, stores);
    CHECK(b.wm_store->grad_norm() == 0.0);
    CHECK(b.pol_store->grad_norm() > 0.0);
    CHECK(b.enc_store->grad_norm() > 0.0);  // BC path reaches the encoder
}

TEST_CASE("the joint loss reaches all three parameter groups") {
    DemoDataset ds = small_push_dataset(3, 730);
    TrainConfig cfg = tiny_config();
    Trainer tr(ds, cfg);
    ModelBundle& b = tr.bundle();
    WindowSampler sampler(ds, cfg.hist_len, cfg.pred_len, cfg.horizon, false);
    Rng rng(7);
    std::vector<TrainWindow> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(sampler.sample(rng));
    LossContext ctx{&b.encoder, &b.stats, &b.sched, cfg.hist_len, cfg.pred_len, cfg.horizon, 3, false};
    PolicyDenoiseFn pol = [&](const Tensor& noisy, int k, const Tensor& hist) {
        return b.policy.denoise(noisy, k, hist);
    };
    WmDenoiseFn wm = [&](const Tensor& noisy, int k, const Tensor& hist, const Tensor& acts) {
        return b.wm.denoise(noisy, k, hist, acts);
    };
    Rng loss_rng(15);
    BatchLosses losses = compute_losses(batch, ctx, pol, &wm, loss_rng);
    Tensor total = add(losses.bc, losses.wm);
    auto stores = b.stores();
    backward(total, stores);
    CHECK(b.enc_store->grad_norm() > 0.0);
    CHECK(b.pol_store->grad_norm() > 0.0);
    CHECK(b.wm_store->grad_norm() > 0.0);

    SECTION("world-model loss alone reaches the shared encoder") {
        Rng r2(16);
        BatchLosses l2 = compute_losses(batch, ctx, pol, &wm, r2);
        backward(l2.wm, stores);
        CHECK(b.enc_store->grad_norm() > 0.0);
    }
    SECTION("stop-gradient flag blocks the target path but keeps the history path") {
        LossContext sg = ctx;
        sg.stopgrad_targets = true;
        Rng r3(17);
        BatchLosses l3 = compute_losses(batch, sg, pol, &wm, r3);
        backward(l3.wm, stores);
        CHECK(b.enc_store->grad_norm() > 0.0);  // history conditioning still tracked
    }
}

TEST_CASE("end-to-end total-loss gradient matches finite differences on a tiny config") {
    DemoDataset ds = small_push_dataset(2, 740);
    TrainConfig cfg = tiny_config();
    Trainer tr(ds, cfg);
    ModelBundle& b = tr.bundle();
    WindowSampler sampler(ds, cfg.hist_len, cfg.pred_len, cfg.horizon, false);
    Rng rng(21);
    std::vector<TrainWindow> batch{sampler.sample(rng), sampler.sample(rng)};
    LossContext ctx{&b.encoder, &b.stats, &b.sched, cfg.hist_len, cfg.pred_len, cfg.horizon, 3, false};

    auto eval_total = [&]() {
        PolicyDenoiseFn pol = [&](const Tensor& noisy, int k, const Tensor& hist) {
            return b.policy.denoise(noisy, k, hist);
        };
        WmDenoiseFn wm = [&](const Tensor& noisy, int k, const Tensor& hist, const Tensor& acts) {
            return b.wm.denoise(noisy, k, hist, acts);
        };
        Rng r(777);  // fixed draws for every evaluation
        BatchLosses l = compute_losses(batch, ctx, pol, &wm, r);
        return add(l.bc, l.wm);
    };

    Tensor total = eval_total();
    auto stores = b.stores();
    backward(total, stores);

    Rng pick(31);
    int checked = 0;
    for (ParameterStore* ps : stores) {
        for (size_t i = 0; i < ps->size(); ++i) {
            Tensor p = ps->param(i);
            // subsample a few coordinates per parameter for runtime
            for (int rep = 0; rep < 2; ++rep) {
                size_t j = static_cast<size_t>(pick.uniform_int(0, static_cast<int>(p.size()) - 1));
                scalar keep = p.data()[j];
                const scalar h = scalar(1e-4);
                p.data()[j] = keep + h;
                double fp = eval_total().item();
                p.data()[j] = keep - h;
                double fm = eval_total().item();
                p.data()[j] = keep;
                double fd = (fp - fm) / (2 * h);
                double an = p.grad()[j];
                double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
                INFO(p.label() << "[" << j << "] analytic " << an << " fd " << fd);
                CHECK(std::abs(an - fd) / denom < 1e-4);
                ++checked;
            }
        }
    }
    CHECK(checked > 100);
}

TEST_CASE("training runs deterministically and the loss trends down") {
    DemoDataset ds = small_push_dataset(10, 760);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 30;
    cfg.steps_per_epoch = 8;
    cfg.batch_size = 8;
    cfg.lr = 1e-3;

    Trainer t1(ds, cfg);
    auto logs1 = t1.train();
    Trainer t2(ds, cfg);
    auto logs2 = t2.train();
    REQUIRE(logs1.size() == logs2.size());
    CHECK(logs1.back().loss_total == logs2.back().loss_total);  // bit-identical

    // ~200 optimization steps: the last-5-epoch average must sit clearly
    // below the first-5 average (trend, not monotonicity)
    double early = 0, late = 0;
    for (int i = 0; i < 5; ++i) {
        early += logs1[static_cast<size_t>(i)].loss_total;
        late += logs1[logs1.size() - 1 - static_cast<size_t>(i)].loss_total;
    }
    CHECK(late < early * 0.9);
}

TEST_CASE("divergence aborts with diagnostics") {
    DemoDataset ds = small_push_dataset(3, 770);
    TrainConfig cfg = tiny_config();
    cfg.divergence_limit = 1e-6;  // force the abort path
    Trainer tr(ds, cfg);
    CHECK_THROWS_WITH(tr.train(), Catch::Matchers::ContainsSubstring("divergence"));
}

TEST_CASE("checkpoint resume continues the epoch counter") {
    DemoDataset ds = small_push_dataset(3, 780);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 3;
    cfg.checkpoint_every = 0;
    std::string dir = std::filesystem::temp_directory_path().string() + "/ddp_resume_test";
    std::filesystem::remove_all(dir);

    Trainer tr(ds, cfg);
    tr.train(dir);
    Checkpoint c = Checkpoint::load(dir + "/checkpoint.bin");
    CHECK(c.meta_int("epoch") == 3);

    TrainConfig cfg2 = cfg;
    cfg2.epochs = 5;
    Trainer tr2(ds, cfg2);
    auto logs = tr2.train("", dir + "/checkpoint.bin");
    REQUIRE(logs.size() == 2);  // resumed at epoch 3 of 5
    CHECK(logs.front().epoch == 3);
    CHECK(logs.back().epoch == 4);
}

TEST_CASE("world model learns a scripted linear latent system") {
    // latents follow o_{t+1} = o_t + B a_t; the encoder is bypassed entirely
    const int D = 4, M = 2, N = 2, A = 2;
    std::vector<double> B{0.5, 0.0, -0.3, 0.4, 0.2, -0.5, 0.0, 0.3};  // D x A
    auto dyn = [&](const std::vector<scalar>& o, const std::vector<scalar>& a) {
        std::vector<scalar> n(o);
        for (int d = 0; d < D; ++d)
            for (int j = 0; j < A; ++j) n[static_cast<size_t>(d)] += static_cast<scalar>(B[static_cast<size_t>(d * A + j)]) * a[static_cast<size_t>(j)];
        return n;
    };

    WorldModelConfig wc{N, M, D, A, 8, {16}};
    ParameterStore ps("wm");
    Rng init_rng(50);
    LatentWorldModel wm(wc, ps, init_rng);
    NoiseSchedule sched = NoiseSchedule::linear(10, scalar(0.02), scalar(0.3));
    std::vector<ParameterStore*> stores{&ps};
    Adam opt(stores, {scalar(1e-3)});

    Rng rng(51);
    auto make_episode = [&](std::vector<std::vector<scalar>>& lat, std::vector<std::vector<scalar>>& act) {
        lat.clear();
        act.clear();
        std::vector<scalar> o(static_cast<size_t>(D));
        for (auto& v : o) v = static_cast<scalar>(rng.uniform(-0.5, 0.5));
        lat.push_back(o);
        for (int t = 0; t < M + N - 1; ++t) {
            std::vector<scalar> a{static_cast<scalar>(rng.uniform(-0.3, 0.3)),
                                  static_cast<scalar>(rng.uniform(-0.3, 0.3))};
            act.push_back(a);
            lat.push_back(dyn(lat.back(), a));
        }
    };

    for (int step = 0; step < 4500; ++step) {
        Tensor loss;
        for (int bi = 0; bi < 8; ++bi) {
            std::vector<std::vector<scalar>> lat, act;
            make_episode(lat, act);
            std::vector<scalar> hist;
            for (int m = 0; m < M; ++m) hist.insert(hist.end(), lat[static_cast<size_t>(m)].begin(), lat[static_cast<size_t>(m)].end());
            std::vector<scalar> tgt;
            for (int n = 0; n < N; ++n) tgt.insert(tgt.end(), lat[static_cast<size_t>(M + n)].begin(), lat[static_cast<size_t>(M + n)].end());
            std::vector<scalar> acts;
            for (int n = 0; n < N; ++n)
                acts.insert(acts.end(), act[static_cast<size_t>(M - 1 + n)].begin(), act[static_cast<size_t>(M - 1 + n)].end());
            int k = rng.uniform_int(1, 10);
            std::vector<scalar> eps(static_cast<size_t>(N * D));
            for (auto& e : eps) e = static_cast<scalar>(rng.normal());
            Tensor eps_t = Tensor::leaf({N, D}, eps);
            Tensor noisy = add_noise(Tensor::leaf({N, D}, tgt), eps_t, k, sched);
            Tensor pred = wm.denoise(noisy, k, Tensor::leaf({M * D}, hist), Tensor::leaf({N * A}, acts));
            Tensor l = mse(eps_t, pred);
            loss = loss.defined() ? add(loss, l) : l;
        }
        loss = scale(loss, scalar(1.0 / 8));
        backward(loss, stores);
        opt.step();
    }

    // predictions against the closed-form linear map
    double total_mse = 0;
    int count = 0;
    std::vector<std::vector<scalar>> last_lat;
    std::vector<scalar> last_hist;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<scalar>> lat, act;
        make_episode(lat, act);
        std::vector<scalar> hist;
        for (int m = 0; m < M; ++m) hist.insert(hist.end(), lat[static_cast<size_t>(m)].begin(), lat[static_cast<size_t>(m)].end());
        std::vector<scalar> acts;
        for (int n = 0; n < N; ++n)
            acts.insert(acts.end(), act[static_cast<size_t>(M - 1 + n)].begin(), act[static_cast<size_t>(M - 1 + n)].end());
        Rng srng(static_cast<uint64_t>(900 + trial));
        Tensor pred = wm.predict(Tensor::leaf({M * D}, hist), Tensor::leaf({N * A}, acts), sched,
                                 SamplerKind::ddpm, 0, srng);
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < D; ++d) {
                double diff = pred.at(static_cast<size_t>(n * D + d)) - lat[static_cast<size_t>(M + n)][static_cast<size_t>(d)];
                total_mse += diff * diff;
                ++count;
            }
        last_lat = lat;
        last_hist = hist;
    }
    CHECK(total_mse / count < 1e-2);

    // three-cycle autoregressive rollout stays near the ground-truth latents
    std::vector<std::vector<scalar>> lat, act;
    make_episode(lat, act);
    std::vector<std::vector<scalar>> window{lat[0], lat[1]};
    std::vector<std::vector<std::vector<scalar>>> cycle_acts(3);
    std::vector<scalar> truth_state = lat[1];
    std::vector<std::vector<scalar>> truth;
    Rng act_rng(61);
    for (int c = 0; c < 3; ++c) {
        for (int n = 0; n < N; ++n) {
            std::vector<scalar> a{static_cast<scalar>(act_rng.uniform(-0.3, 0.3)),
                                  static_cast<scalar>(act_rng.uniform(-0.3, 0.3))};
            cycle_acts[static_cast<size_t>(c)].push_back(a);
            truth_state = dyn(truth_state, a);
            truth.push_back(truth_state);
        }
    }
    auto provider = [&](int cycle) {
        std::vector<scalar> flat;
        for (const auto& a : cycle_acts[static_cast<size_t>(cycle)]) flat.insert(flat.end(), a.begin(), a.end());
        return flat;
    };
    Rng roll_rng(62);
    auto roll = wm.rollout(window, provider, 3, sched, SamplerKind::ddpm, 0, roll_rng);
    double drift = 0;
    int dn = 0;
    for (size_t i = 0; i < roll.latents.size(); ++i)
        for (int d = 0; d < D; ++d) {
            double diff = roll.latents[i][static_cast<size_t>(d)] - truth[i][static_cast<size_t>(d)];
            drift += diff * diff;
            ++dn;
        }
    CHECK(drift / dn < 0.1);
}

TEST_CASE("policy trained on a constant expert samples near the constant") {
    const int H = 4, A = 1, ctx_dim = 4;
    PolicyConfig pc{H, 2, A, ctx_dim, 8, {16}};
    ParameterStore ps("policy");
    Rng init_rng(70);
    DiffusionPolicy pol(pc, ps, init_rng);
    NoiseSchedule sched = NoiseSchedule::linear(10, scalar(0.02), scalar(0.3));
    std::vector<ParameterStore*> stores{&ps};
    Adam opt(stores, {scalar(1e-3)});

    const scalar target_action = scalar(0.3);
    Rng rng(71);
    for (int step = 0; step < 3500; ++step) {
        Tensor loss;
        for (int bi = 0; bi < 8; ++bi) {
            std::vector<scalar> ctx(static_cast<size_t>(ctx_dim));
            for (auto& v : ctx) v = static_cast<scalar>(rng.uniform(-1, 1));
            Tensor x0 = Tensor::full({H, A}, target_action);
            int k = rng.uniform_int(1, 10);
            std::vector<scalar> eps(static_cast<size_t>(H * A));
            for (auto& e : eps) e = static_cast<scalar>(rng.normal());
            Tensor eps_t = Tensor::leaf({H, A}, eps);
            Tensor noisy = add_noise(x0, eps_t, k, sched);
            Tensor l = mse(eps_t, pol.denoise(noisy, k, Tensor::leaf({ctx_dim}, ctx)));
            loss = loss.defined() ? add(loss, l) : l;
        }
        backward(scale(loss, scalar(1.0 / 8)), stores);
        opt.step();
    }

    for (int trial = 0; trial < 10; ++trial) {
        Rng srng(static_cast<uint64_t>(500 + trial));
        std::vector<scalar> ctx(static_cast<size_t>(ctx_dim));
        Rng crng(static_cast<uint64_t>(600 + trial));
        for (auto& v : ctx) v = static_cast<scalar>(crng.uniform(-1, 1));
        Tensor plan = pol.sample_plan(Tensor::leaf({ctx_dim}, ctx), sched, SamplerKind::ddpm, 0, srng);
        for (size_t i = 0; i < plan.size(); ++i) CHECK(std::abs(plan.at(i) - target_action) < 0.1);
    }
}
