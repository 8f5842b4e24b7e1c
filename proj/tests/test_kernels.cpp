#include <random>

#include "detox/kernels.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace detox;

TEST_SUITE("kernels") {
    TEST_CASE("omp kernels are bit-identical to the serial reference") {
        std::mt19937_64 rng(3);
        const std::size_t n = 37, k = 53, m = 29;
        const auto x = testing::random_vector(n * k, rng);
        const auto w = testing::random_vector(m * k, rng);
        const auto dy = testing::random_vector(n * m, rng);

        std::vector<float> y1(n * m), y2(n * m);
        kernels::serial::matmul_nt(x.data(), w.data(), y1.data(), n, k, m);
        kernels::omp::matmul_nt(x.data(), w.data(), y2.data(), n, k, m);
        CHECK(y1 == y2);

        std::vector<float> dx1(n * k, 0.5f), dx2(n * k, 0.5f);
        kernels::serial::matmul_nn_acc(dy.data(), w.data(), dx1.data(), n, m, k);
        kernels::omp::matmul_nn_acc(dy.data(), w.data(), dx2.data(), n, m, k);
        CHECK(dx1 == dx2);

        std::vector<float> dw1(m * k, -0.25f), dw2(m * k, -0.25f);
        kernels::serial::matmul_tn_acc(dy.data(), x.data(), dw1.data(), n, m, k);
        kernels::omp::matmul_tn_acc(dy.data(), x.data(), dw2.data(), n, m, k);
        CHECK(dw1 == dw2);
    }

    TEST_CASE("matmul_nt matches a naive double loop") {
        std::mt19937_64 rng(5);
        const std::size_t n = 4, k = 19, m = 3;
        const auto x = testing::random_vector(n * k, rng);
        const auto w = testing::random_vector(m * k, rng);
        std::vector<float> y(n * m);
        kernels::matmul_nt(x.data(), w.data(), y.data(), n, k, m);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double s = 0;
                for (std::size_t t = 0; t < k; ++t) s += double(x[i * k + t]) * w[j * k + t];
                CHECK(y[i * m + j] == doctest::Approx(s).epsilon(1e-5));
            }
    }

    TEST_CASE("gelu and its derivative") {
        CHECK(kernels::gelu(0.0) == 0.0);
        for (double x : {-3.0, -0.7, 0.2, 1.5, 4.0}) {
            CHECK(kernels::gelu(x) == doctest::Approx(testing::gelu_ref(x)).epsilon(1e-12));
            const double h = 1e-6;
            const double fd = (testing::gelu_ref(x + h) - testing::gelu_ref(x - h)) / (2 * h);
            CHECK(kernels::gelu_grad(x) == doctest::Approx(fd).epsilon(1e-6));
        }
    }

    TEST_CASE("softmax returns the log partition") {
        std::vector<double> v = {1.0, 2.0, 3.0};
        const double lse = kernels::softmax_inplace(v.data(), v.size());
        CHECK(lse == doctest::Approx(std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0))));
        CHECK(v[0] + v[1] + v[2] == doctest::Approx(1.0));
        CHECK(v[2] == doctest::Approx(std::exp(3.0 - lse)));
    }
}
