#pragma once

// AAM-Softmax: cross-entropy on cosine logits with an additive angular
// margin on the target class and a global scale.

#include <cmath>
#include <numbers>
#include <vector>

#include "wpmfa/tensor.hpp"

namespace wpmfa {

struct AamConfig {
    double margin = 0.2;  // radians
    double scale = 30.0;

    void validate() const {
        if (margin < 0.0 || margin >= std::numbers::pi / 2)
            throw std::invalid_argument("aam: margin must be in [0, pi/2)");
        if (scale <= 0.0) throw std::invalid_argument("aam: scale must be positive");
    }
};

namespace lossdet {

// Applies cos(theta + m) to the target entry of each row of a cosine
// matrix. When theta + m >= pi the logit would stop being monotone in
// theta, so the standard linearized penalty cos(theta) - m*sin(m) is
// used instead.
inline Tensor aam_adjust(const Tensor& cosines, const std::vector<std::size_t>& labels,
                         double m) {
    const std::size_t b = cosines.dim(0), c = cosines.dim(1);
    if (labels.size() != b)
        throw std::invalid_argument("aam_adjust: batch size mismatch");
    for (std::size_t l : labels)
        if (l >= c) throw std::out_of_range("aam_adjust: label " + std::to_string(l) +
                                            " out of range for " + std::to_string(c) +
                                            " classes");
    const double cos_m = std::cos(m), sin_m = std::sin(m);
    const double threshold = std::cos(std::numbers::pi - m);
    Tensor out = cosines.clone();
    std::vector<double> deriv(b);  // d(adjusted)/d(cos) at the target entry
    for (std::size_t i = 0; i < b; ++i) {
        const double cy = cosines[i * c + labels[i]];
        if (cy > threshold) {
            const double sy = std::sqrt(std::max(1.0 - cy * cy, 0.0));
            out[i * c + labels[i]] = cy * cos_m - sy * sin_m;
            deriv[i] = cos_m + (sy > 0.0 ? cy * sin_m / sy : 0.0);
        } else {
            out[i * c + labels[i]] = cy - m * sin_m;
            deriv[i] = 1.0;
        }
    }
    if (detail::recording({&cosines})) {
        detail::record(out, [xn = cosines.node(), on = out.node(), labels,
                             deriv = std::move(deriv), b, c] {
            const auto& g = detail::out_grad(on);
            xn->ensure_grad();
            for (std::size_t i = 0; i < b * c; ++i) xn->grad[i] += g[i];
            for (std::size_t i = 0; i < b; ++i) {
                const std::size_t j = i * c + labels[i];
                xn->grad[j] += g[j] * (deriv[i] - 1.0);
            }
        });
    }
    return out;
}

// Mean cross-entropy over rows of a logit matrix.
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<std::size_t>& labels) {
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b)
        throw std::invalid_argument("cross_entropy: batch size mismatch");
    Tensor out = Tensor::zeros({1});
    std::vector<double> probs(b * c);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j] - mx);
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(logits[i * c + j] - mx) / z;
        total += mx + std::log(z) - logits[i * c + labels[i]];
    }
    out[0] = total / static_cast<double>(b);
    if (detail::recording({&logits})) {
        detail::record(out, [xn = logits.node(), on = out.node(), labels,
                             probs = std::move(probs), b, c] {
            const double g = detail::out_grad(on)[0];
            xn->ensure_grad();
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    double d = probs[i * c + j] - (j == labels[i] ? 1.0 : 0.0);
                    xn->grad[i * c + j] += g * d / static_cast<double>(b);
                }
        });
    }
    return out;
}

// Row-wise L2 normalization of a [N x E] matrix.
inline Tensor normalize_rows(const Tensor& x) {
    const std::size_t e = x.dim(1);
    Tensor ones = Tensor::full({e, 1}, 1.0);
    Tensor norms = sqrt_op(matmul(mul(x, x), ones));      // [N x 1]
    Tensor inv = reciprocal(reshape(norms, {x.dim(0)}));  // [N]
    return row_scale(x, inv);
}

}  // namespace lossdet

// embeddings [B x E], class_weights [C x E]; both are L2-normalized
// internally before the cosine logits are formed.
inline Tensor aam_softmax_loss(const Tensor& embeddings, const std::vector<std::size_t>& labels,
                               const Tensor& class_weights, const AamConfig& cfg) {
    cfg.validate();
    if (embeddings.ndim() != 2 || class_weights.ndim() != 2 ||
        embeddings.dim(1) != class_weights.dim(1))
        throw std::invalid_argument("aam_softmax_loss: embedding dim mismatch");
    Tensor cosines = matmul(lossdet::normalize_rows(embeddings),
                            transpose(lossdet::normalize_rows(class_weights)));
    Tensor logits = scale(lossdet::aam_adjust(cosines, labels, cfg.margin), cfg.scale);
    return lossdet::cross_entropy_mean(logits, labels);
}

// Training accuracy on plain (margin-free) cosine logits.
inline double cosine_accuracy(const Tensor& embeddings, const std::vector<std::size_t>& labels,
                              const Tensor& class_weights) {
    Tensor cosines = matmul(lossdet::normalize_rows(embeddings),
                            transpose(lossdet::normalize_rows(class_weights)));
    const std::size_t b = cosines.dim(0), c = cosines.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (cosines[i * c + j] > cosines[i * c + best]) best = j;
        if (best == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(b);
}

}  // namespace wpmfa
