#include "i2cl/vectors.hpp"

#include <cmath>

#include "i2cl/binary_io.hpp"

namespace i2cl {

namespace {

constexpr const char* kContextMagic = "I2CLV1";
constexpr const char* kCoefficientMagic = "I2CLC1";

bool same(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
}

}  // namespace

std::string to_string(Module m) {
  switch (m) {
    case Module::kMha:
      return "MHA";
    case Module::kMlp:
      return "MLP";
    case Module::kHidden:
      return "HIDDEN";
  }
  return "?";
}

Module parse_module(const std::string& s) {
  if (s == "MHA" || s == "mha") {
    return Module::kMha;
  }
  if (s == "MLP" || s == "mlp") {
    return Module::kMlp;
  }
  if (s == "HIDDEN" || s == "hidden") {
    return Module::kHidden;
  }
  throw ConfigError("unknown module '" + s + "' (expected MHA, MLP or HIDDEN)");
}

void ContextVector::validate() const {
  if (attn.rows() < 1 || attn.cols() < 1) {
    throw ShapeError("context vector is empty");
  }
  if (mlp.rows() != attn.rows() || mlp.cols() != attn.cols() || hidden.rows() != attn.rows() ||
      hidden.cols() != attn.cols()) {
    throw ShapeError("context vector components disagree on (L, D)");
  }
  if (source_count < 1) {
    throw ConfigError("context vector must aggregate at least one demonstration");
  }
  require_finite(attn, "context vector (MHA)");
  require_finite(mlp, "context vector (MLP)");
  require_finite(hidden, "context vector (hidden)");
}

bool ContextVector::operator==(const ContextVector& other) const {
  return source_count == other.source_count && same(attn, other.attn) && same(mlp, other.mlp) &&
         same(hidden, other.hidden);
}

CoefficientSet CoefficientSet::uniform(std::size_t n_layers, double lambda, double beta) {
  CoefficientSet c;
  c.values.resize(static_cast<Eigen::Index>(n_layers), 4);
  c.values.col(kLambdaAttn).setConstant(lambda);
  c.values.col(kBetaAttn).setConstant(beta);
  c.values.col(kLambdaMlp).setConstant(lambda);
  c.values.col(kBetaMlp).setConstant(beta);
  return c;
}

double CoefficientSet::lambda(Module m, int layer) const {
  return values(layer - 1, m == Module::kMlp ? kLambdaMlp : kLambdaAttn);
}

double CoefficientSet::beta(Module m, int layer) const {
  return values(layer - 1, m == Module::kMlp ? kBetaMlp : kBetaAttn);
}

void CoefficientSet::validate() const {
  if (values.rows() < 1 || values.cols() != 4) {
    throw ShapeError("coefficient set must be L x 4 with L >= 1");
  }
  require_finite(values, "coefficient set");
}

bool CoefficientSet::operator==(const CoefficientSet& other) const {
  return same(values, other.values);
}

void save_context(const ContextVector& v, const std::filesystem::path& path) {
  v.validate();
  binary::Writer out(path);
  out.magic(kContextMagic);
  out.u32(static_cast<std::uint32_t>(v.n_layers()));
  out.u32(static_cast<std::uint32_t>(v.d_model()));
  out.array(v.attn);
  out.array(v.mlp);
  out.array(v.hidden);
  out.f64(static_cast<double>(v.source_count));
  out.finish();
}

ContextVector load_context(const std::filesystem::path& path) {
  binary::Reader in(path);
  in.expect_magic(kContextMagic);
  const auto L = static_cast<Eigen::Index>(in.u32("header L"));
  const auto D = static_cast<Eigen::Index>(in.u32("header D"));
  if (L < 1 || D < 1) {
    throw FormatError("'" + path.string() + "': empty context vector header");
  }
  ContextVector v;
  v.attn = in.array(L, D, "attn");
  v.mlp = in.array(L, D, "mlp");
  v.hidden = in.array(L, D, "hidden");
  const double count = in.f64("source count");
  in.expect_end();
  if (!(count >= 1.0) || count != std::floor(count)) {
    throw FormatError("'" + path.string() + "': bad source count");
  }
  v.source_count = static_cast<std::size_t>(count);
  v.validate();
  return v;
}

void save_coefficients(const CoefficientSet& c, std::size_t d_model,
                       const std::filesystem::path& path) {
  c.validate();
  binary::Writer out(path);
  out.magic(kCoefficientMagic);
  out.u32(static_cast<std::uint32_t>(c.n_layers()));
  out.u32(static_cast<std::uint32_t>(d_model));
  out.array(c.values);  // row-major L x 4 is exactly the flatten order
  out.finish();
}

CoefficientSet load_coefficients(const std::filesystem::path& path, std::size_t* d_model) {
  binary::Reader in(path);
  in.expect_magic(kCoefficientMagic);
  const auto L = static_cast<Eigen::Index>(in.u32("header L"));
  const auto D = in.u32("header D");
  if (L < 1) {
    throw FormatError("'" + path.string() + "': empty coefficient header");
  }
  CoefficientSet c;
  c.values = in.array(L, 4, "coefficients");
  in.expect_end();
  c.validate();
  if (d_model != nullptr) {
    *d_model = D;
  }
  return c;
}

}  // namespace i2cl
