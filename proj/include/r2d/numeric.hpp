#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace r2d {

/// Raised for every contract violation in the library. The message is the
/// short reason string ("empty logits", "divergent support", ...).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Error subclasses let callers (the CLI in particular) map failures onto
// distinct exit codes without string matching.
class ParseError : public Error {
public:
    using Error::Error;
};

class MisalignedError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

class SpecError : public Error {
public:
    using Error::Error;
};

using Vec = std::vector<double>;

double sigmoid(double x);

/// exp(z_i/T) / sum_j exp(z_j/T), with max-subtraction.
Vec softmax(std::span<const double> logits, double temperature = 1.0);

/// Writes the softmax into `out` (same length as `logits`) without allocating.
void softmax_into(std::span<const double> logits, double temperature, std::span<double> out);

/// Shannon entropy in bits; 0*log(0) is taken as 0.
double entropy_bits(std::span<const double> p);

/// KL(p || q) in nats.
double kl_divergence(std::span<const double> p, std::span<const double> q);

double l1_distance(std::span<const double> a, std::span<const double> b);

/// Pairwise summation; result does not depend on how callers chunk the data
/// beyond the usual rounding of a balanced tree.
double pairwise_sum(std::span<const double> values);

bool is_prob_vector(std::span<const double> p, double tol = 1e-9);

}  // namespace r2d
