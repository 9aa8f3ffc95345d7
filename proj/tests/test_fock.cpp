#include "closedsys/fock.hpp"

#include <catch_amalgamated.hpp>

#include <map>
#include <random>

using namespace closedsys;
using namespace closedsys::fock;

namespace {

Vec random_vec(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = cplx(nd(rng), nd(rng));
  return v;
}

Mat random_hermitian(int n, std::mt19937_64& rng) {
  Mat a(n, n);
  for (int j = 0; j < n; ++j) a.col(j) = random_vec(n, rng);
  return 0.5 * (a + a.adjoint());
}

// Projector onto states with at most `n` photons.
Eigen::VectorXd below(const FockSpace& fs, int n) {
  Eigen::VectorXd d(static_cast<Eigen::Index>(fs.dim()));
  for (std::size_t s = 0; s < fs.dim(); ++s) d(static_cast<Eigen::Index>(s)) = fs.number(s) <= n ? 1.0 : 0.0;
  return d;
}

Vec random_below(const FockSpace& fs, int n, std::mt19937_64& rng) {
  Vec v = random_vec(static_cast<int>(fs.dim()), rng);
  return (v.array() * below(fs, n).cast<cplx>().array()).matrix().normalized();
}

// Brute force: full (unsymmetrized) tensor-power space up to n particles, built independently of
// the sector-tensor code.  Returns the isometry from occupation basis into sum_n (C^M)^{(x)n}.
struct TensorOracle {
  std::vector<Mat> embed;  // per sector: M^n x |sector|
  explicit TensorOracle(const FockSpace& fs) {
    const int m = fs.modes();
    for (int n = 0; n <= fs.n_max(); ++n) {
      int dim = 1;
      for (int i = 0; i < n; ++i) dim *= m;
      Mat e = Mat::Zero(dim, static_cast<Eigen::Index>(fs.sector(n).size()));
      for (int flat = 0; flat < dim; ++flat) {
        std::vector<int> legs(static_cast<std::size_t>(n));
        int r = flat;
        for (int l = n - 1; l >= 0; --l) {
          legs[static_cast<std::size_t>(l)] = r % m;
          r /= m;
        }
        std::vector<int> sorted = legs;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t idx = fs.index(sorted);
        e(flat, static_cast<Eigen::Index>(fs.sector_position(idx))) = 1.0;
      }
      for (Eigen::Index c = 0; c < e.cols(); ++c) e.col(c).normalize();
      embed.push_back(e);
    }
  }
};

Mat kron_power_sum(const Mat& a, const Mat& b, int n) {
  // sum_l a (x) .. b(l) .. (x) a
  Mat acc;
  for (int pos = 0; pos < n; ++pos) {
    Mat t = Mat::Identity(1, 1);
    for (int l = 0; l < n; ++l) {
      const Mat& f = l == pos ? b : a;
      Mat nt(t.rows() * f.rows(), t.cols() * f.cols());
      for (Eigen::Index i = 0; i < t.rows(); ++i)
        for (Eigen::Index j = 0; j < t.cols(); ++j) nt.block(i * f.rows(), j * f.cols(), f.rows(), f.cols()) = t(i, j) * f;
      t = nt;
    }
    if (pos == 0) acc = t; else acc += t;
  }
  return acc;
}

Mat sector_block(const FockSpace& fs, const Mat& full, int n) {
  const auto& sec = fs.sector(n);
  Mat b(static_cast<Eigen::Index>(sec.size()), static_cast<Eigen::Index>(sec.size()));
  for (std::size_t i = 0; i < sec.size(); ++i)
    for (std::size_t j = 0; j < sec.size(); ++j)
      b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = full(static_cast<Eigen::Index>(sec[i]), static_cast<Eigen::Index>(sec[j]));
  return b;
}

}  // namespace

TEST_CASE("basis enumeration is lexicographic with the vacuum first", "[fock][basis]") {
  const FockSpace fs(4, 3);
  REQUIRE(fs.dim() == basis_size(4, 3));
  REQUIRE(fs.dim() == 35);
  REQUIRE(fs.number(0) == 0);
  for (std::size_t i = 1; i < fs.dim(); ++i) REQUIRE(fs.occupation(i - 1) < fs.occupation(i));
  for (std::size_t i = 0; i < fs.dim(); ++i) REQUIRE(fs.index_from_occupation(fs.occupation(i)) == i);
  REQUIRE(FockSpace(16, 3).dim() == basis_size(16, 3));
  REQUIRE_THROWS_AS(fs.index({0, 0, 0, 0}), std::out_of_range);
}

TEST_CASE("creation and annihilation: vacuum, CCR, adjointness", "[fock][ccr]") {
  std::mt19937_64 rng(1);
  const FockSpace fs(5, 3);
  const Vec f = random_vec(5, rng), g = random_vec(5, rng);
  const auto af = annihilate(fs, f), cg = create(fs, g);
  REQUIRE((af.matrix * fs.vacuum()).norm() == 0.0);
  const cplx vac = fs.vacuum().dot(af.matrix * (cg.matrix * fs.vacuum()));
  REQUIRE(std::abs(vac - f.dot(g)) < 1e-13);
  REQUIRE((Mat(create(fs, f).matrix.adjoint()) - af.dense()).norm() == 0.0);

  // Mode-basis CCR below the cutoff, entrywise.
  const Eigen::VectorXd sub = below(fs, fs.n_max() - 1);
  double worst = 0.0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      Vec ei = Vec::Zero(5), ej = Vec::Zero(5);
      ei(i) = 1.0;
      ej(j) = 1.0;
      const auto a = annihilate(fs, ei), c = create(fs, ej);
      const Mat comm = (a.matrix * c.matrix - c.matrix * a.matrix).toDense();
      Mat r = comm - (i == j ? 1.0 : 0.0) * Mat::Identity(static_cast<Eigen::Index>(fs.dim()), static_cast<Eigen::Index>(fs.dim()));
      r = r * sub.cast<cplx>().asDiagonal();
      worst = std::max(worst, r.cwiseAbs().maxCoeff());
    }
  REQUIRE(worst <= 1e-13);

  // Random f, g.
  const Mat comm = (af.matrix * cg.matrix - cg.matrix * af.matrix).toDense();
  const Mat r = (comm - f.dot(g) * Mat::Identity(static_cast<Eigen::Index>(fs.dim()), static_cast<Eigen::Index>(fs.dim()))) *
                sub.cast<cplx>().asDiagonal();
  REQUIRE(r.cwiseAbs().maxCoeff() <= 1e-13 * f.norm() * g.norm());
}

TEST_CASE("relative bound of field operators by the number operator", "[fock][bound]") {
  std::mt19937_64 rng(2);
  const FockSpace fs(6, 3);
  Eigen::VectorXd w(static_cast<Eigen::Index>(fs.dim()));
  for (std::size_t s = 0; s < fs.dim(); ++s) w(static_cast<Eigen::Index>(s)) = 1.0 / std::sqrt(fs.number(s) + 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    const Vec f = random_vec(6, rng);
    for (const auto& op : {annihilate(fs, f), create(fs, f)}) {
      const SpMat m = op.matrix * SpMat(w.cast<cplx>().asDiagonal().toDenseMatrix().sparseView());
      const SpMat md = m.adjoint();
      const double nrm = spectral_norm([&](const Vec& x, Vec& y) { y = m * x; }, [&](const Vec& x, Vec& y) { y = md * x; }, fs.dim());
      REQUIRE(nrm / f.norm() <= 1.01);
      REQUIRE(nrm / f.norm() >= 0.5);
    }
  }
}

TEST_CASE("number operator and dGamma", "[fock][dgamma]") {
  std::mt19937_64 rng(3);
  const FockSpace fs(4, 3);
  const auto n = number_operator(fs);
  REQUIRE((n.matrix * fs.vacuum()).norm() == 0.0);
  Vec f = random_vec(4, rng).normalized();
  const Vec one = create(fs, f).matrix * fs.vacuum();
  REQUIRE((n.matrix * one - one).norm() < 1e-14);
  REQUIRE((n.dense() - dGamma(fs, Mat::Identity(4, 4)).dense()).norm() < 1e-14);
  REQUIRE(dGamma(fs, Mat::Zero(4, 4)).matrix.nonZeros() == 0);

  const ModeSet ms = ModeSet::uniform(4, 1.0);
  const Mat absk = ms.momentum_multiplier([](double k) { return cplx(std::abs(k)); });
  const auto he = dGamma(fs, absk);
  Vec e1 = Vec::Zero(4), e3 = Vec::Zero(4);
  e1(1) = 1.0;
  e3(3) = 1.0;
  const Vec two = create(fs, e1).matrix * (create(fs, e3).matrix * fs.vacuum());
  REQUIRE((he.matrix * two - (std::abs(ms.momenta[1]) + std::abs(ms.momenta[3])) * two).norm() < 1e-14);

  Mat nonherm = Mat::Zero(4, 4);
  nonherm(0, 1) = 1.0;
  REQUIRE_THROWS_AS(dGamma(fs, nonherm), std::invalid_argument);
}

TEST_CASE("dGamma monotonicity under a dominating positive one-particle operator", "[fock][dgamma][property]") {
  std::mt19937_64 rng(4);
  const int m = 5;
  const FockSpace fs(m, 3);
  for (int trial = 0; trial < 5; ++trial) {
    const Mat w = random_hermitian(m, rng);
    Mat p = random_vec(m, rng) * random_vec(m, rng).adjoint();
    p = p * p.adjoint();
    // w' = sqrt(w^2 + P) >= |w| >= 0 so that ||w phi|| <= ||w' phi||.
    Eigen::SelfAdjointEigenSolver<Mat> es(w * w + p);
    const Mat wp = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().cast<cplx>().asDiagonal() * es.eigenvectors().adjoint();
    const auto dw = dGamma(fs, w), dwp = dGamma(fs, 0.5 * (wp + wp.adjoint()));
    for (int k = 0; k < 10; ++k) {
      const Vec phi = random_vec(static_cast<int>(fs.dim()), rng);
      REQUIRE((dw.matrix * phi).norm() <= (dwp.matrix * phi).norm() * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("Gamma examples", "[fock][gamma]") {
  std::mt19937_64 rng(5);
  const FockSpace fs(4, 3);
  const auto d = static_cast<Eigen::Index>(fs.dim());
  REQUIRE((Gamma(fs, OneParticleMap(Mat::Identity(4, 4))).dense() - Mat::Identity(d, d)).norm() < 1e-14);
  const Vec psi = random_vec(static_cast<int>(d), rng);
  const Vec proj = Gamma(fs, OneParticleMap(Mat::Zero(4, 4))).matrix * psi;
  REQUIRE((proj - psi(0) * fs.vacuum()).norm() < 1e-14);
  const double delta = 0.3;
  Eigen::VectorXd en(d);
  for (Eigen::Index s = 0; s < d; ++s) en(s) = std::exp(-delta * fs.number(static_cast<std::size_t>(s)));
  REQUIRE((Gamma(fs, OneParticleMap(std::exp(-delta) * Mat::Identity(4, 4))).dense() - Mat(en.cast<cplx>().asDiagonal())).norm() < 1e-13);
  REQUIRE_THROWS_AS(Gamma(fs, OneParticleMap(2.0 * Mat::Identity(4, 4))), std::invalid_argument);
}

TEST_CASE("Gamma and dGamma_two match the explicit tensor-power oracle", "[fock][gamma][oracle]") {
  std::mt19937_64 rng(6);
  const int m = 3;
  const FockSpace fs(m, 3);
  const TensorOracle oracle(fs);
  Mat j = random_hermitian(m, rng) + I_UNIT * random_hermitian(m, rng);
  j /= 2.0 * Eigen::JacobiSVD<Mat>(j).singularValues()(0);
  const Mat g = Gamma(fs, OneParticleMap(j)).dense();
  const Mat b = random_hermitian(m, rng);
  const Mat dg2 = dGamma_two(fs, OneParticleMap(j), OneParticleMap(b / 10.0)).dense();
  for (int n = 1; n <= 3; ++n) {
    const Mat& e = oracle.embed[static_cast<std::size_t>(n)];
    Mat jn = Mat::Identity(1, 1);
    for (int l = 0; l < n; ++l) {
      Mat nt(jn.rows() * m, jn.cols() * m);
      for (Eigen::Index r = 0; r < jn.rows(); ++r)
        for (Eigen::Index c = 0; c < jn.cols(); ++c) nt.block(r * m, c * m, m, m) = jn(r, c) * j;
      jn = nt;
    }
    REQUIRE((sector_block(fs, g, n) - e.adjoint() * jn * e).norm() < 1e-13);
    const Mat sum = kron_power_sum(j, b / 10.0, n);
    REQUIRE((sector_block(fs, dg2, n) - e.adjoint() * sum * e).norm() < 1e-13);
  }
  // Collapse rules.
  const Mat w = random_hermitian(m, rng);
  const auto id = OneParticleMap(Mat::Identity(m, m));
  REQUIRE((dGamma_two(fs, id, id).dense() - number_operator(fs).dense()).norm() < 1e-13);
  REQUIRE((dGamma_two(fs, id, OneParticleMap(w)).dense() - dGamma(fs, w).dense()).norm() < 1e-12);
}

TEST_CASE("dGamma_two(j, [|k|, j]) against the sector-by-sector oracle", "[fock][gamma][oracle]") {
  const ModeSet ms = ModeSet::uniform(8, 2.0);
  const FockSpace fs(8, 3);
  const TensorOracle oracle(fs);
  const auto pp = partition_pair(ms, 2.0 * ms.position_spacing());
  const Mat w = ms.momentum_multiplier([](double k) { return cplx(std::abs(k)); });
  const Mat j = pp.near.matrix, c = w * j - j * w;
  const Mat got = matrix_of([&](const Vec& v) { return apply_dgamma_two(j, c, fs, fs, v); }, fs.dim(), fs.dim());
  for (int n = 1; n <= 3; ++n) {
    const Mat& e = oracle.embed[static_cast<std::size_t>(n)];
    REQUIRE((sector_block(fs, got, n) - e.adjoint() * kron_power_sum(j, c, n) * e).norm() < 1e-12);
  }
}

TEST_CASE("identification examples and the symmetrizer oracle", "[fock][identification]") {
  std::mt19937_64 rng(7);
  const int m = 4;
  const FockSpace fs(m, 3);
  REQUIRE((identification(fs, fs.vacuum(), fs.vacuum()) - fs.vacuum()).norm() == 0.0);
  const Vec g = random_vec(m, rng), h = random_vec(m, rng);
  const Vec ag = create(fs, g).matrix * fs.vacuum(), ah = create(fs, h).matrix * fs.vacuum();
  REQUIRE((identification(fs, ag, fs.vacuum()) - ag).norm() < 1e-14);
  REQUIRE((identification(fs, fs.vacuum(), ag) - ag).norm() < 1e-14);
  const Vec got = identification(fs, ag, ah);
  const Vec ref = create(fs, h).matrix * ag;
  REQUIRE((got - ref).norm() < 1e-13);

  // Direct two-photon symmetrization: a*(h)a*(g)Omega has tensor (h(x)g + g(x)h)/sqrt2 normalized in
  // the symmetric subspace; its occupation amplitudes follow from the tensor oracle.
  const TensorOracle oracle(fs);
  Vec sym(m * m);
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b) sym(a * m + b) = (h(a) * g(b) + g(a) * h(b)) / std::sqrt(2.0);
  const Vec occ = oracle.embed[2].adjoint() * sym;
  for (std::size_t k = 0; k < fs.sector(2).size(); ++k)
    REQUIRE(std::abs(got(static_cast<Eigen::Index>(fs.sector(2)[k])) - occ(static_cast<Eigen::Index>(k))) < 1e-13);

  // Multilinear over three photons, symmetric in the far factor.
  const Vec f = random_vec(m, rng);
  const Vec afg = create(fs, f).matrix * ag;
  REQUIRE((identification(fs, ah, afg) - create(fs, h).matrix * afg).norm() < 1e-12);
  REQUIRE((identification(fs, afg, ah) - identification(fs, ah, afg)).norm() < 1e-12);
  REQUIRE_THROWS_AS(identification(fs, afg, afg), std::invalid_argument);
}

TEST_CASE("factorization map U", "[fock][factorization]") {
  std::mt19937_64 rng(8);
  const int m = 3;
  const FockSpace fs(m, 3);
  const FockSpace dbl = doubled(fs);
  const auto u = factorization_U(fs, dbl);
  const std::size_t d = fs.dim();
  Vec vac2 = Vec::Zero(static_cast<Eigen::Index>(dbl.dim()));
  vac2(0) = 1.0;
  REQUIRE((Vec(u * vac2) - kron_vec(fs.vacuum(), fs.vacuum())).norm() == 0.0);
  const Mat utu = Mat(u.adjoint() * u);
  REQUIRE((utu - Mat::Identity(utu.rows(), utu.cols())).norm() == 0.0);

  const Vec u1 = random_vec(m, rng), u2 = random_vec(m, rng);
  Vec uu(2 * m);
  uu << u1, u2;
  const Vec left = u * (create(dbl, uu).matrix * vac2);
  const Vec right = kron_vec(create(fs, u1).matrix * fs.vacuum(), fs.vacuum()) + kron_vec(fs.vacuum(), create(fs, u2).matrix * fs.vacuum());
  REQUIRE((left - right).norm() < 1e-14);
  Vec u0(2 * m);
  u0 << u1, Vec::Zero(m);
  REQUIRE((Vec(u * (create(dbl, u0).matrix * vac2)) - kron_vec(create(fs, u1).matrix * fs.vacuum(), fs.vacuum())).norm() < 1e-14);

  // Intertwining on random sub-cutoff vectors.
  const auto cu = create(dbl, uu);
  const SpMat a1 = create(fs, u1).matrix, a2 = create(fs, u2).matrix;
  for (int trial = 0; trial < 5; ++trial) {
    const Vec psi = random_below(dbl, fs.n_max() - 1, rng);
    const Vec lhs = u * (cu.matrix * psi);
    const Vec up = u * psi;
    Vec rhs = Vec::Zero(static_cast<Eigen::Index>(d * d));
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) {
        const cplx c = up(static_cast<Eigen::Index>(a * d + b));
        if (c == cplx(0.0, 0.0)) continue;
        Vec ea = Vec::Zero(static_cast<Eigen::Index>(d)), eb = ea;
        ea(static_cast<Eigen::Index>(a)) = 1.0;
        eb(static_cast<Eigen::Index>(b)) = 1.0;
        rhs += c * (kron_vec(a1 * ea, eb) + kron_vec(ea, a2 * eb));
      }
    REQUIRE((lhs - rhs).norm() < 1e-13);
  }
}

TEST_CASE("partition of unity", "[fock][partition]") {
  const ModeSet ms = ModeSet::uniform(64, 4.0);
  const double d = 4.0 * ms.position_spacing();
  const auto pp = partition_pair(ms, d);
  REQUIRE(near_profile(0.0) == 1.0);
  REQUIRE(far_profile(0.0) == 0.0);
  REQUIRE(near_profile(3.0) < 1e-16);
  REQUIRE(far_profile(3.0) == 1.0);
  double worst = 0.0;
  for (int i = 0; i < ms.size(); ++i) {
    const double y = std::abs(ms.positions[static_cast<std::size_t>(i)]);
    worst = std::max(worst, std::abs(pp.near_values(i) * pp.near_values(i) + pp.far_values(i) * pp.far_values(i) - 1.0));
    if (y <= d) REQUIRE(pp.near_values(i) == 1.0);
    if (y >= 2 * d) REQUIRE(std::abs(pp.near_values(i)) < 1e-16);
  }
  REQUIRE(worst <= 1e-14);
  for (double s = 0.0; s <= 3.0; s += 1e-3) REQUIRE(std::abs(near_profile(s) * near_profile(s) + far_profile(s) * far_profile(s) - 1.0) <= 1e-14);
  REQUIRE((pp.near.matrix - pp.near.matrix.adjoint()).norm() < 1e-13);
  REQUIRE(pp.near.contraction);
  REQUIRE(pp.far.contraction);
  REQUIRE_THROWS_AS(partition_pair(ms, 1.5 * ms.position_spacing()), std::invalid_argument);
  REQUIRE_THROWS_AS(partition_pair(ms, 0.3 * ms.position_extent()), std::invalid_argument);
}

TEST_CASE("Gamma-check isometry, adjoint identity and range projector", "[fock][partition][property]") {
  std::mt19937_64 rng(9);
  const ModeSet ms = ModeSet::uniform(8, 2.0);
  const FockSpace fs(8, 3);
  const auto pp = partition_pair(ms, 2.0 * ms.position_spacing());
  const auto gc = gamma_check(fs, pp);
  const std::size_t d = fs.dim();

  REQUIRE((gc.apply(fs.vacuum()) - kron_vec(fs.vacuum(), fs.vacuum())).norm() < 1e-15);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec psi = random_vec(static_cast<int>(d), rng);
    REQUIRE(std::abs(gc.apply(psi).norm() / psi.norm() - 1.0) <= 1e-12);
    REQUIRE((gc.adjoint(gc.apply(psi)) - psi).norm() <= 1e-12 * psi.norm());
  }
  // Adjoint equals I o (Gamma(j0) (x) Gamma(j_inf)) on F(h) (x) F(h) with total number <= n_max.
  for (int trial = 0; trial < 10; ++trial) {
    Vec w = Vec::Zero(static_cast<Eigen::Index>(d * d));
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        if (fs.number(a) + fs.number(b) <= fs.n_max()) w(static_cast<Eigen::Index>(a * d + b)) = random_vec(1, rng)(0);
    const Vec lhs = gc.adjoint(w), rhs = identification_after_partition(fs, pp, w);
    REQUIRE((lhs - rhs).norm() <= 1e-11 * w.norm());
  }
  // On near-localized (x) far-localized product vectors, Gamma-check Gamma-check^* acts as the identity.
  const auto inside = position_indicator(ms, [&](double y) { return std::abs(y) <= pp.radius; });
  const auto outside = position_indicator(ms, [&](double y) { return std::abs(y) >= 2.0 * pp.radius; });
  const FockSpace low(8, 1);
  for (int trial = 0; trial < 5; ++trial) {
    Vec a = Vec::Zero(static_cast<Eigen::Index>(d)), b = a;
    for (std::size_t s = 0; s < d; ++s) {
      if (fs.number(s) <= 1) a(static_cast<Eigen::Index>(s)) = random_vec(1, rng)(0);
      if (fs.number(s) <= 2) b(static_cast<Eigen::Index>(s)) = random_vec(1, rng)(0);
    }
    a = apply_gamma(inside.matrix, fs, a);
    b = apply_gamma(outside.matrix, fs, b);
    const Vec w = kron_vec(a, b);
    REQUIRE((gc.apply(gc.adjoint(w)) - w).norm() <= 1e-12 * w.norm());
  }
}

TEST_CASE("free-field commutator with Gamma-check adjoint", "[fock][partition][property]") {
  // H_E G* - G* (H_E (x) 1 + 1 (x) H_E) = dGamma(j*, ad(|k|, j*)) U^*  on the shared-cutoff subspace.
  std::mt19937_64 rng(10);
  const ModeSet ms = ModeSet::uniform(8, 2.0);
  const FockSpace fs(8, 3);
  const auto pp = partition_pair(ms, 2.0 * ms.position_spacing());
  const auto gc = gamma_check(fs, pp);
  const Mat w = ms.momentum_multiplier([](double k) { return cplx(std::abs(k)); });
  const auto he = dGamma(fs, w);
  const auto [js, ad] = partition_commutator_maps(ms, pp);
  const FockSpace& dbl = gc.dbl;
  const std::size_t d = fs.dim();
  double worst = 0.0, scale = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    Vec x = Vec::Zero(static_cast<Eigen::Index>(d * d));
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        if (fs.number(a) + fs.number(b) <= fs.n_max()) x(static_cast<Eigen::Index>(a * d + b)) = random_vec(1, rng)(0);
    const Mat hd = he.dense();
    Mat xm = Eigen::Map<const Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(x.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    Mat hxm = hd * xm + xm * hd.transpose();
    Vec hx2(x.size());
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) hx2(static_cast<Eigen::Index>(a * d + b)) = hxm(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    const Vec lhs = he.matrix * gc.adjoint(x) - gc.adjoint(hx2);
    const Vec rhs = apply_dgamma_two(js, ad, dbl, fs, Vec(gc.u.adjoint() * x));
    worst = std::max(worst, (lhs - rhs).norm());
    scale = std::max(scale, rhs.norm());
    // The opposite sign is clearly excluded.
    REQUIRE((lhs + rhs).norm() > 0.1 * rhs.norm());
  }
  REQUIRE(scale > 1e-3);
  REQUIRE(worst <= 1e-11);
}

TEST_CASE("sector-wise cutoff commutator matches the dense Fock matrix", "[fock][scaling][oracle]") {
  const ModeSet ms = ModeSet::uniform(12, 2.0);
  const FockSpace fs(12, 3);
  const double d = 3.0 * ms.position_spacing();
  const auto he = dGamma(fs, ms.momentum_multiplier([](double k) { return cplx(std::abs(k)); }));
  const auto g = Gamma(fs, inner_cutoff(ms, d));
  Eigen::VectorXd w(static_cast<Eigen::Index>(fs.dim()));
  for (std::size_t s = 0; s < fs.dim(); ++s) w(static_cast<Eigen::Index>(s)) = 1.0 / (fs.number(s) + 1.0);
  const Mat c = (he.dense() * g.dense() - g.dense() * he.dense()) * w.cast<cplx>().asDiagonal();
  const double ref = Eigen::JacobiSVD<Mat>(c).singularValues()(0);
  Eigen::VectorXd cy(12);
  for (int i = 0; i < 12; ++i) cy(i) = inner_profile(ms.positions[static_cast<std::size_t>(i)], d);
  REQUIRE(std::abs(free_field_cutoff_commutator(ms, 3, cy) - ref) <= 1e-6 * ref);
}

TEST_CASE("commutator of the free field with a smooth photon cutoff decays like 1/d", "[fock][scaling]") {
  const ModeSet ms = ModeSet::uniform(64, 4.0);
  std::vector<double> vals;
  const double d0 = 8.0 * ms.position_spacing();
  for (double d : {d0, 2 * d0, 4 * d0}) {
    Eigen::VectorXd cy(64);
    for (int i = 0; i < 64; ++i) cy(i) = inner_profile(ms.positions[static_cast<std::size_t>(i)], d);
    vals.push_back(free_field_cutoff_commutator(ms, 3, cy));
  }
  REQUIRE(vals[0] / vals[1] >= 1.7);
  REQUIRE(vals[1] / vals[2] >= 1.7);
}
