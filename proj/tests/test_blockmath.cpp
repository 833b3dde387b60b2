#include "gridfit/blockmath.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace gridfit;

namespace {

Mat3 random_mat3(std::mt19937_64& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Mat3 m;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m(i, j) = scale * uni(rng);
    return m;
}

/// Well-conditioned random complex matrix: random parts plus a dominant
/// real diagonal.
ComplexMat3 random_well_conditioned(std::mt19937_64& rng) {
    ComplexMat3 z{random_mat3(rng), random_mat3(rng)};
    z.re += 4.0 * Mat3::Identity();
    return z;
}

ComplexMat3 random_symmetric(std::mt19937_64& rng) {
    ComplexMat3 z = random_well_conditioned(rng);
    z.re = ((z.re + z.re.transpose()) / 2.0).eval();
    z.im = ((z.im + z.im.transpose()) / 2.0).eval();
    return z;
}

}  // namespace

TEST_CASE("embed maps identity and j-identity to their block forms") {
    Mat6 id = embed(ComplexMat3{Mat3::Identity(), Mat3::Zero()});
    CHECK((id - Mat6::Identity()).cwiseAbs().maxCoeff() == 0.0);

    Mat6 jid = embed(ComplexMat3{Mat3::Zero(), Mat3::Identity()});
    Mat6 expected = Mat6::Zero();
    expected.topRightCorner<3, 3>() = -Mat3::Identity();
    expected.bottomLeftCorner<3, 3>() = Mat3::Identity();
    CHECK((jid - expected).cwiseAbs().maxCoeff() == 0.0);
    CHECK(has_embedding_structure(jid));
}

TEST_CASE("embed is a ring homomorphism") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        ComplexMat3 a{random_mat3(rng), random_mat3(rng)};
        ComplexMat3 b{random_mat3(rng), random_mat3(rng)};

        // additive and multiplicative structure against direct complex algebra
        CHECK((embed(a) + embed(b) - embed(a + b)).cwiseAbs().maxCoeff() < 1e-12);
        ComplexMat3 ab = ComplexMat3::from_complex(a.to_complex() * b.to_complex());
        CHECK((embed(a) * embed(b) - embed(ab)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("embed of an inverse is the inverse of the embedding") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        ComplexMat3 a = random_well_conditioned(rng);
        Mat6 inv_of_embed = embed(a).inverse();
        Mat6 embed_of_inv = embed(complex_inverse(a));
        CHECK((inv_of_embed - embed_of_inv).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("complex_inverse handles the trivial cases") {
    ComplexMat3 id{Mat3::Identity(), Mat3::Zero()};
    ComplexMat3 inv = complex_inverse(id);
    CHECK((inv.re - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(inv.im.cwiseAbs().maxCoeff() < 1e-15);

    // (1+j)^-1 = (1-j)/2 per phase
    ComplexMat3 one_plus_j{Mat3::Identity(), Mat3::Identity()};
    inv = complex_inverse(one_plus_j);
    CHECK((inv.re - 0.5 * Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((inv.im + 0.5 * Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("complex_inverse matches a direct complex solve") {
    std::mt19937_64 rng(101);
    for (int trial = 0; trial < 200; ++trial) {
        ComplexMat3 a = random_well_conditioned(rng);
        ComplexMat3 woodbury = complex_inverse(a);
        Eigen::Matrix3cd direct = a.to_complex().inverse();
        CHECK((woodbury.to_complex() - direct).cwiseAbs().maxCoeff() < 1e-10);

        // inverse times original is the complex identity
        Eigen::Matrix3cd prod = woodbury.to_complex() * a.to_complex();
        CHECK((prod - Eigen::Matrix3cd::Identity()).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("complex_inverse preserves symmetry") {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 100; ++trial) {
        ComplexMat3 a = random_symmetric(rng);
        REQUIRE(a.is_symmetric());
        ComplexMat3 inv = complex_inverse(a);
        CHECK((inv.re - inv.re.transpose()).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((inv.im - inv.im.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("complex_inverse rejects degenerate inputs") {
    ComplexMat3 singular{Mat3::Zero(), Mat3::Identity()};
    CHECK_THROWS_AS(complex_inverse(singular), SingularMatrix);

    Mat3 nearly = Mat3::Identity();
    nearly(2, 2) = 1e-14;
    CHECK_THROWS_AS(complex_inverse(ComplexMat3{nearly, Mat3::Zero()}), SingularMatrix);
}

TEST_CASE("elementary matrices have a single unit entry") {
    ElementaryMat e11 = elementary(1, 1, 3);
    Eigen::MatrixXd d = e11.dense();
    CHECK(d(0, 0) == 1.0);
    CHECK(d.sum() == 1.0);

    ElementaryMat e12 = elementary(1, 2, 3);
    Eigen::MatrixXd sym = e12.dense() + e12.dense().transpose();
    CHECK(sym(0, 1) == 1.0);
    CHECK(sym(1, 0) == 1.0);
    CHECK(sym.sum() == 2.0);

    CHECK_THROWS_AS(elementary(0, 1, 3), IndexOutOfRange);
    CHECK_THROWS_AS(elementary(1, 4, 3), IndexOutOfRange);
}

TEST_CASE("trace identity: tr(E^T M) picks the (i,j) entry") {
    std::mt19937_64 rng(9);
    Eigen::MatrixXd m(4, 4);
    std::uniform_real_distribution<double> uni(-2.0, 2.0);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) m(i, j) = uni(rng);
    for (int i = 1; i <= 4; ++i) {
        for (int j = 1; j <= 4; ++j) {
            double tr = (elementary(i, j, 4).dense().transpose() * m).trace();
            CHECK(tr == m(i - 1, j - 1));
        }
    }
}
