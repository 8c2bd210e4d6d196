#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace segtopo {

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

// Error hierarchy. The CLI maps each kind to a distinct diagnostic.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    ConfigError(const std::string& key, const std::string& what)
        : Error(what), key_(key) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

class StructuralError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    NumericalError(const std::string& what, double residual = 0.0)
        : Error(what), residual_(residual) {}
    double residual() const { return residual_; }

private:
    double residual_;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ResourceError : public Error {
public:
    using Error::Error;
};

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace segtopo
