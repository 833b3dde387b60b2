#pragma once

#include "gridfit/common.hpp"

#include <cmath>

namespace gridfit {

// ---------------------------------------------------------------------------
// 3x3 complex matrices stored as a real/imaginary pair
// ---------------------------------------------------------------------------

struct ComplexMat3 {
    Mat3 re = Mat3::Zero();
    Mat3 im = Mat3::Zero();

    ComplexMat3() = default;
    ComplexMat3(const Mat3& r, const Mat3& i) : re(r), im(i) {}

    ComplexMat3 operator+(const ComplexMat3& o) const { return {re + o.re, im + o.im}; }
    ComplexMat3 operator-(const ComplexMat3& o) const { return {re - o.re, im - o.im}; }
    ComplexMat3 operator*(const ComplexMat3& o) const {
        return {re * o.re - im * o.im, re * o.im + im * o.re};
    }
    ComplexMat3 operator*(double s) const { return {re * s, im * s}; }

    bool is_symmetric(double tol = 1e-12) const {
        return (re - re.transpose()).cwiseAbs().maxCoeff() <= tol &&
               (im - im.transpose()).cwiseAbs().maxCoeff() <= tol;
    }

    Eigen::Matrix3cd to_complex() const {
        Eigen::Matrix3cd z;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) z(i, j) = {re(i, j), im(i, j)};
        return z;
    }

    static ComplexMat3 from_complex(const Eigen::Matrix3cd& z) {
        return {z.real(), z.imag()};
    }
};

/// Reciprocal 1-norm condition estimate; 0 when the matrix fails to invert.
inline double rcond_estimate(const Mat3& m) {
    double det = m.determinant();
    if (!std::isfinite(det) || det == 0.0) return 0.0;
    Mat3 inv = m.inverse();
    if (!inv.allFinite()) return 0.0;
    double n = m.cwiseAbs().colwise().sum().maxCoeff();
    double ni = inv.cwiseAbs().colwise().sum().maxCoeff();
    if (n == 0.0 || ni == 0.0) return 0.0;
    return 1.0 / (n * ni);
}

/// Inverts a real 3x3 matrix, rejecting reciprocal condition below rcond_min.
inline Mat3 invert_checked(const Mat3& m, double rcond_min, const char* what) {
    double rc = rcond_estimate(m);
    if (rc < rcond_min)
        throw SingularMatrix(std::string(what) + " (rcond " + format_g17(rc) + ")");
    return m.inverse();
}

// ---------------------------------------------------------------------------
// Complex-to-real block embedding  <A> = [[Re A, -Im A], [Im A, Re A]]
// ---------------------------------------------------------------------------

inline Mat6 embed(const ComplexMat3& a) {
    Mat6 m;
    m.topLeftCorner<3, 3>() = a.re;
    m.topRightCorner<3, 3>() = -a.im;
    m.bottomLeftCorner<3, 3>() = a.im;
    m.bottomRightCorner<3, 3>() = a.re;
    return m;
}

inline Mat6 embed(const Mat3& re, const Mat3& im) { return embed(ComplexMat3{re, im}); }

/// True when m carries the [[A,-B],[B,A]] block structure within tol.
inline bool has_embedding_structure(const Mat6& m, double tol = 1e-12) {
    Mat3 a = m.topLeftCorner<3, 3>();
    Mat3 b = m.bottomLeftCorner<3, 3>();
    return (m.bottomRightCorner<3, 3>() - a).cwiseAbs().maxCoeff() <= tol &&
           (m.topRightCorner<3, 3>() + b).cwiseAbs().maxCoeff() <= tol;
}

// ---------------------------------------------------------------------------
// Woodbury-based complex inversion
// ---------------------------------------------------------------------------

/// (A + jB)^-1 = (A + B A^-1 B)^-1 - j (A + B A^-1 B)^-1 B A^-1.
/// This is the production inversion path; tests cross-check it against a
/// direct complex LU solve.
inline ComplexMat3 complex_inverse(const ComplexMat3& z, double rcond_min = 1e-12) {
    Mat3 a_inv = invert_checked(z.re, rcond_min, "real part of complex inverse");
    Mat3 c = z.re + z.im * a_inv * z.im;
    Mat3 c_inv = invert_checked(c, rcond_min, "Woodbury pivot of complex inverse");
    return {c_inv, -(c_inv * z.im * a_inv)};
}

// ---------------------------------------------------------------------------
// Elementary matrices
// ---------------------------------------------------------------------------

/// Single-entry matrix; indices are 1-based.
struct ElementaryMat {
    int rows = 0;
    int cols = 0;
    int i = 0;
    int j = 0;

    Eigen::MatrixXd dense() const {
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(rows, cols);
        m(i - 1, j - 1) = 1.0;
        return m;
    }
};

inline ElementaryMat elementary(int i, int j, int n) {
    if (i < 1 || j < 1 || i > n || j > n)
        throw IndexOutOfRange("elementary(" + std::to_string(i) + "," + std::to_string(j) +
                              "," + std::to_string(n) + ")");
    return {n, n, i, j};
}

/// E^(i,j) as a dense 3x3 (0-based indices), the building block of the
/// symmetric-parameter derivatives.
inline Mat3 unit3(int i, int j) {
    Mat3 m = Mat3::Zero();
    m(i, j) = 1.0;
    return m;
}

/// dM/dw for a symmetric 3x3 parameterized by its upper triangle:
/// E^(i,i) on the diagonal, E^(i,j) + E^(j,i) off it.
inline Mat3 symmetric_pattern3(int i, int j) {
    Mat3 m = Mat3::Zero();
    m(i, j) = 1.0;
    m(j, i) = 1.0;
    return m;
}

}  // namespace gridfit
