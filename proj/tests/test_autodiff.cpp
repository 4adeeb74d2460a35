#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "ucap/autodiff.hpp"
#include "ucap/checkpoint.hpp"
#include "ucap/lstm.hpp"
#include "ucap/optim.hpp"

#include "test_support.hpp"

using namespace ucap;
using testsupport::max_grad_check_error;
using testsupport::random_tensor;
using testsupport::rel_err;

TEST_CASE("matmul identity and hand cases") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_data({2, 2}, {2, 3, 4, 5});
    Tensor prod = matmul(eye, a);
    CHECK(prod.data()[0] == 2.0);
    CHECK(prod.data()[1] == 3.0);
    CHECK(prod.data()[2] == 4.0);
    CHECK(prod.data()[3] == 5.0);

    Tensor row = Tensor::from_data({1, 2}, {1, 2});
    Tensor col = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(row, col).value() == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor c = matmul(a, b);
    auto expect = testsupport::oracle_matmul(
        {a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, 3, 4, 2);
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(c.data()[i] - expect[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({3, 4});
    Tensor b = Tensor::zeros({5, 2});
    try {
        matmul(a, b);
        FAIL("expected shape error");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[3x4]") != std::string::npos);
        CHECK(msg.find("[5x2]") != std::string::npos);
    }
}

TEST_CASE("elementwise basics") {
    CHECK(sigmoid(Tensor::scalar(0.0)).value() == 0.5);
    CHECK(tanh(Tensor::scalar(0.0)).value() == 0.0);
    CHECK(log(Tensor::scalar(1.0)).value() == 0.0);
    CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), std::domain_error);
    CHECK_THROWS_AS(log(Tensor::scalar(0.0)), std::domain_error);

    // scalar-vs-tensor broadcasting
    Tensor v = Tensor::from_data({3}, {1, 2, 3});
    Tensor s = Tensor::scalar(10.0);
    Tensor r = add(v, s);
    CHECK(r.data()[2] == 13.0);
    Tensor m = mul(s, v);
    CHECK(m.data()[0] == 10.0);
    // non-scalar mismatch is rejected
    CHECK_THROWS_AS(add(v, Tensor::zeros({2})), std::invalid_argument);
}

TEST_CASE("softmax values and stability") {
    Tensor p0 = softmax(Tensor::from_data({2}, {0, 0}));
    CHECK(p0.data()[0] == Catch::Approx(0.5).margin(1e-15));
    Tensor p1 = softmax(Tensor::from_data({2}, {1000, 1000}));
    CHECK(p1.data()[0] == Catch::Approx(0.5).margin(1e-12));
    CHECK(p1.data()[1] == Catch::Approx(0.5).margin(1e-12));

    // frozen from the extended-precision direct formula
    Tensor p = softmax(Tensor::from_data({3}, {1, 2, 3}));
    CHECK(p.data()[0] == Catch::Approx(0.09003057317038046).epsilon(1e-12));
    CHECK(p.data()[1] == Catch::Approx(0.24472847105479767).epsilon(1e-12));
    CHECK(p.data()[2] == Catch::Approx(0.66524095577482190).epsilon(1e-12));
    auto oracle = testsupport::oracle_softmax({1, 2, 3});
    for (int i = 0; i < 3; ++i) CHECK(rel_err(p.data()[i], oracle[i]) < 1e-13);
}

TEST_CASE("softmax sums to one and is shift invariant") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + uniform_index(rng, 8);
        Tensor x = random_tensor({n}, rng, 20.0);
        Tensor p = softmax(x);
        double total = 0.0;
        for (double v : p.data()) total += v;
        CHECK(std::abs(total - 1.0) < 1e-9);

        const double shift = uniform(rng, -50.0, 50.0);
        std::vector<double> shifted(x.data().begin(), x.data().end());
        for (double& v : shifted) v += shift;
        Tensor q = softmax(Tensor::from_data({n}, shifted));
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(p.data()[i] - q.data()[i]) < 1e-9);
    }
}

TEST_CASE("backward: square at x=3") {
    Tensor x = Tensor::from_data({1}, {3.0});
    x.set_requires_grad(true);
    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor loss = square(x);
        tape.backward(loss);
    }
    CHECK(x.grad()[0] == Catch::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward: sum(sigmoid(Wx)) matches finite differences") {
    Rng rng(23);
    Tensor w = random_tensor({4, 3}, rng);
    Tensor x = random_tensor({3}, rng);
    double err = max_grad_check_error({w, x}, [&] { return sum(sigmoid(matvec(w, x))); });
    CHECK(err < 1e-4);
}

TEST_CASE("backward: unused parameter keeps zero grad") {
    Tensor used = Tensor::from_data({1}, {2.0});
    Tensor unused = Tensor::from_data({3}, {1, 1, 1});
    used.set_requires_grad(true);
    unused.set_requires_grad(true);
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(square(used));
    }
    for (double g : unused.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward: non-scalar loss is a contract error") {
    Tensor x = Tensor::from_data({2}, {1, 2});
    x.set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = square(x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward: branch adjoints add") {
    Rng rng(31);
    Tensor x = random_tensor({4}, rng);
    // x feeds two branches; the adjoint must be the sum of both
    double err = max_grad_check_error({x}, [&] {
        return add(sum(sigmoid(x)), sum(mul(x, x)));
    });
    CHECK(err < 1e-4);
}

TEST_CASE("gradients of every differentiable op vs finite differences") {
    Rng rng(47);
    int trials = 0;
    for (int rep = 0; rep < 5; ++rep) {
        {
            Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
            Tensor w = random_tensor({3, 2}, rng);
            CHECK(max_grad_check_error({a, b}, [&] { return sum(mul(matmul(a, b), w.detached_copy())); }) < 1e-4);
            ++trials;
        }
        {
            Tensor m = random_tensor({4, 3}, rng), v = random_tensor({3}, rng);
            CHECK(max_grad_check_error({m, v}, [&] { return sum(tanh(matvec(m, v))); }) < 1e-4);
            ++trials;
        }
        {
            Tensor a = random_tensor({5}, rng), b = random_tensor({5}, rng);
            CHECK(max_grad_check_error({a, b}, [&] { return dot(sigmoid(a), tanh(b)); }) < 1e-4);
            ++trials;
        }
        {
            Tensor a = random_tensor({6}, rng), s = random_tensor({1}, rng);
            CHECK(max_grad_check_error({a, s}, [&] { return sum(mul(a, s)); }) < 1e-4);
            CHECK(max_grad_check_error({a, s}, [&] { return sum(add(a, s)); }) < 1e-4);
            CHECK(max_grad_check_error({a, s}, [&] { return sum(sub(a, s)); }) < 1e-4);
            trials += 3;
        }
        {
            std::vector<double> pos(4);
            for (double& v : pos) v = uniform(rng, 0.1, 3.0);
            Tensor a = Tensor::from_data({4}, pos);
            CHECK(max_grad_check_error({a}, [&] { return sum(log(a)); }) < 1e-4);
            CHECK(max_grad_check_error({a}, [&] { return sum(square(a)); }) < 1e-4);
            CHECK(max_grad_check_error({a}, [&] { return mean(clamp(a, 0.2, 2.5)); }) < 1e-4);
            trials += 3;
        }
        {
            Tensor x = random_tensor({5}, rng, 2.0);
            Tensor w = random_tensor({5}, rng);
            CHECK(max_grad_check_error({x}, [&] { return dot(softmax(x), w.detached_copy()); }) < 1e-4);
            const std::size_t idx = uniform_index(rng, 5);
            CHECK(max_grad_check_error({x}, [&] { return log_softmax_pick(x, idx); }) < 1e-4);
            trials += 2;
        }
        {
            Tensor x = random_tensor({8}, rng);
            CHECK(max_grad_check_error({x}, [&] { return sum(sigmoid(slice(x, 2, 4))); }) < 1e-4);
            const std::size_t row = uniform_index(rng, 3);
            Tensor table = random_tensor({3, 4}, rng);
            CHECK(max_grad_check_error({table}, [&] { return sum(square(embedding_row(table, row))); }) < 1e-4);
            const std::size_t pi = uniform_index(rng, 8);
            CHECK(max_grad_check_error({x}, [&] { return square(pick(x, pi)); }) < 1e-4);
            trials += 3;
        }
        {
            Tensor a = Tensor::scalar(uniform(rng, -1, 1));
            Tensor b = Tensor::scalar(uniform(rng, -1, 1));
            Tensor c = Tensor::scalar(uniform(rng, -1, 1));
            std::vector<Tensor> terms = {a, b, c};
            CHECK(max_grad_check_error({a, b, c}, [&] { return square(add_n(terms)); }) < 1e-4);
            ++trials;
        }
    }
    CHECK(trials >= 50);
}

TEST_CASE("lstm_cell zero weights and inputs") {
    Rng rng(3);
    LstmWeights w = LstmWeights::init(3, 4, rng);
    for (double& v : w.w_x.mutable_data()) v = 0.0;
    for (double& v : w.w_h.mutable_data()) v = 0.0;
    LstmState s = LstmState::zeros(4);
    LstmState next = lstm_cell(w, Tensor::zeros({3}), s);
    for (double v : next.h.data()) CHECK(v == 0.0);
    for (double v : next.c.data()) CHECK(v == 0.0);
}

TEST_CASE("lstm_cell forget-gate saturation") {
    Rng rng(5);
    const std::size_t in = 3, hid = 4;
    LstmWeights w = LstmWeights::init(in, hid, rng);
    // push the forget gate to its +inf limit
    for (std::size_t u = 0; u < hid; ++u) w.b.mutable_data()[hid + u] = 50.0;
    std::vector<double> xv(in), hv(hid), cv(hid);
    for (double& v : xv) v = uniform(rng, -1, 1);
    for (double& v : hv) v = uniform(rng, -1, 1);
    for (double& v : cv) v = uniform(rng, -1, 1);
    LstmState s{Tensor::from_data({hid}, hv), Tensor::from_data({hid}, cv)};
    LstmState next = lstm_cell(w, Tensor::from_data({in}, xv), s);
    auto oracle = testsupport::oracle_lstm_cell(
        {w.w_x.data().begin(), w.w_x.data().end()}, {w.w_h.data().begin(), w.w_h.data().end()},
        {w.b.data().begin(), w.b.data().end()}, xv, hv, cv, in, hid);
    for (std::size_t u = 0; u < hid; ++u) {
        const double expected = cv[u] + oracle.gate_i[u] * oracle.cand[u];
        CHECK(std::abs(next.c.data()[u] - expected) < 1e-9);
    }
}

TEST_CASE("lstm_cell matches gate-by-gate oracle") {
    Rng rng(9);
    const std::size_t in = 5, hid = 6;
    LstmWeights w = LstmWeights::init(in, hid, rng);
    std::vector<double> xv(in), hv(hid), cv(hid);
    for (double& v : xv) v = uniform(rng, -2, 2);
    for (double& v : hv) v = uniform(rng, -1, 1);
    for (double& v : cv) v = uniform(rng, -1, 1);
    LstmState next = lstm_cell(w, Tensor::from_data({in}, xv),
                               {Tensor::from_data({hid}, hv), Tensor::from_data({hid}, cv)});
    auto oracle = testsupport::oracle_lstm_cell(
        {w.w_x.data().begin(), w.w_x.data().end()}, {w.w_h.data().begin(), w.w_h.data().end()},
        {w.b.data().begin(), w.b.data().end()}, xv, hv, cv, in, hid);
    for (std::size_t u = 0; u < hid; ++u) {
        CHECK(std::abs(next.h.data()[u] - oracle.h[u]) < 1e-10);
        CHECK(std::abs(next.c.data()[u] - oracle.c[u]) < 1e-10);
    }
}

TEST_CASE("lstm_cell gradients vs finite differences") {
    Rng rng(13);
    const std::size_t in = 3, hid = 3;
    LstmWeights w = LstmWeights::init(in, hid, rng);
    Tensor x = random_tensor({in}, rng);
    CHECK(max_grad_check_error({w.w_x, w.w_h, w.b, x}, [&] {
        LstmState s = lstm_cell(w, x, LstmState::zeros(hid));
        return add(sum(s.h), sum(square(s.c)));
    }) < 1e-4);
}

TEST_CASE("seeded runs are bit-identical") {
    auto run = [] {
        Rng rng(1234);
        Tensor w = Tensor::param({4, 4}, rng);
        Tensor x = random_tensor({4}, rng);
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = sum(sigmoid(matvec(w, x)));
        tape.backward(loss);
        std::vector<double> out(w.grad().begin(), w.grad().end());
        out.push_back(loss.value());
        return out;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Rng rng(17);
    ParamSet params;
    Tensor w = params.add("w", Tensor::param({3}, rng));
    std::vector<double> before(w.data().begin(), w.data().end());
    AdamState adam({.lr = 0.001});
    adam.step(params);
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.data()[i] == before[i]);
}

TEST_CASE("adam: first step with unit gradient moves by about lr") {
    ParamSet params;
    Tensor w = params.add("w", Tensor::param_zeros({1}));
    w.mutable_grad()[0] = 1.0;
    AdamState adam({.lr = 0.001});
    adam.step(params);
    CHECK(w.data()[0] == Catch::Approx(-0.001).epsilon(1e-6));
    // grads cleared after the step
    CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("adam: descends (w-2)^2") {
    ParamSet params;
    Tensor w = params.add("w", Tensor::param_zeros({1}));
    AdamState adam({.lr = 0.01});
    auto loss_value = [&] { return (w.data()[0] - 2.0) * (w.data()[0] - 2.0); };
    double prev = loss_value();
    for (int i = 0; i < 100; ++i) {
        Tape tape;
        {
            Tape::Scope scope(tape);
            Tensor loss = square(sub(w, Tensor::scalar(2.0)));
            tape.backward(loss);
        }
        adam.step(params);
        const double cur = loss_value();
        CHECK(cur <= prev + 1e-12);
        prev = cur;
    }
    // longer run converges
    for (int i = 0; i < 2000; ++i) {
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.backward(square(sub(w, Tensor::scalar(2.0))));
        }
        adam.step(params);
    }
    CHECK(std::abs(w.data()[0] - 2.0) < 0.05);
}

TEST_CASE("adam: parameter without gradient buffer is a contract error") {
    ParamSet params;
    Tensor w = Tensor::zeros({2});  // not trainable
    params.add("w", w);
    AdamState adam;
    CHECK_THROWS_AS(adam.step(params), std::invalid_argument);
}

TEST_CASE("gradient clipping caps the global norm") {
    ParamSet params;
    Tensor a = params.add("a", Tensor::param_zeros({2}));
    Tensor b = params.add("b", Tensor::param_zeros({1}));
    a.mutable_grad()[0] = 3.0;
    a.mutable_grad()[1] = 0.0;
    b.mutable_grad()[0] = 4.0;
    const double norm = clip_grad_norm(params, 5.0);
    CHECK(norm == Catch::Approx(5.0));
    a.mutable_grad()[0] = 30.0;
    b.mutable_grad()[0] = 40.0;
    clip_grad_norm(params, 5.0);
    const double after = std::sqrt(a.grad()[0] * a.grad()[0] + b.grad()[0] * b.grad()[0]);
    CHECK(after == Catch::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("checkpoint round-trip is bit exact") {
    namespace fs = std::filesystem;
    Rng rng(77);
    ParamSet params;
    params.add("gen.embed", Tensor::param({7, 3}, rng));
    params.add("gen.lstm.b", Tensor::param({12}, rng));
    params.add("dis.score.w", Tensor::param({5}, rng));
    const fs::path path = fs::temp_directory_path() / "ucap_ckpt_test.bin";
    save_checkpoint(path, params);

    auto entries = load_checkpoint(path);
    REQUIRE(entries.size() == 3);
    for (const auto& [name, original] : params) {
        bool found = false;
        for (const auto& e : entries) {
            if (e.name != name) continue;
            found = true;
            REQUIRE(e.tensor.shape() == original.shape());
            CHECK(std::memcmp(e.tensor.data().data(), original.data().data(),
                              original.numel() * sizeof(double)) == 0);
        }
        CHECK(found);
    }

    // load_into restores values
    Rng rng2(78);
    ParamSet fresh;
    fresh.add("gen.embed", Tensor::param({7, 3}, rng2));
    fresh.add("gen.lstm.b", Tensor::param({12}, rng2));
    fresh.add("dis.score.w", Tensor::param({5}, rng2));
    load_into(path, fresh);
    CHECK(std::memcmp(fresh.get("gen.embed").data().data(), params.get("gen.embed").data().data(),
                      21 * sizeof(double)) == 0);
    fs::remove(path);
}

TEST_CASE("checkpoint rejects bad magic") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "ucap_bad_magic.bin";
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE!and more";
    }
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
    fs::remove(path);
}
