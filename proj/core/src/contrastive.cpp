#include "dvit/contrastive.hpp"

#include <algorithm>
#include <cmath>

#include "op_detail.hpp"

namespace dvit {

using detail::record;
using detail::tracing;

void ContrastiveConfig::validate() const {
    if (temperature <= 0.0)
        throw InvalidTemperature("contrastive: temperature must be > 0, got " +
                                 std::to_string(temperature));
    if (proj_out_dim <= 0 || proj_hidden_dim < 0)
        throw ConfigError("contrastive: projection dims must be positive");
}

template <typename T>
ProjectionHeadT<T> ProjectionHeadT<T>::init(int embed_dim, int hidden_dim, int out_dim, Rng& rng) {
    if (hidden_dim <= 0) hidden_dim = embed_dim;
    const T sigma = T(0.02);
    ProjectionHeadT<T> h;
    h.fc1_w = TensorT<T>::trunc_normal({embed_dim, hidden_dim}, rng, sigma, true);
    h.fc1_b = TensorT<T>::zeros({hidden_dim}, true);
    h.fc2_w = TensorT<T>::trunc_normal({hidden_dim, hidden_dim}, rng, sigma, true);
    h.fc2_b = TensorT<T>::zeros({hidden_dim}, true);
    h.fc3_w = TensorT<T>::trunc_normal({hidden_dim, out_dim}, rng, sigma, true);
    h.fc3_b = TensorT<T>::zeros({out_dim}, true);
    return h;
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>*>> ProjectionHeadT<T>::named() {
    return {
        {"proj.fc1.weight", &fc1_w}, {"proj.fc1.bias", &fc1_b}, {"proj.fc2.weight", &fc2_w},
        {"proj.fc2.bias", &fc2_b},   {"proj.fc3.weight", &fc3_w}, {"proj.fc3.bias", &fc3_b},
    };
}

template <typename T>
void ProjectionHeadT<T>::set_requires_grad(bool b) {
    for (auto& [name, t] : named()) t->set_requires_grad(b);
}

template <typename T>
ProjectedFeaturesT<T> project(const TensorT<T>& tokens, const ProjectionHeadT<T>& head, bool normalize) {
    if (tokens.rank() != 3) throw ShapeMismatch("project: expected tokens [B,N+1,d]");
    const std::int64_t B = tokens.dim(0);
    const std::int64_t N = tokens.dim(1) - 1;

    TensorT<T> h = gelu(linear(tokens, head.fc1_w, &head.fc1_b));
    h = gelu(linear(h, head.fc2_w, &head.fc2_b));
    TensorT<T> out = linear(h, head.fc3_w, &head.fc3_b);
    if (normalize) out = l2_normalize(out);

    const std::int64_t p = out.dim(2);
    ProjectedFeaturesT<T> f;
    f.global = reshape(slice(out, 1, 0, 1), {B, p});
    f.patches = slice(out, 1, 1, N);
    return f;
}

template <typename T>
TensorT<T> info_nce(const TensorT<T>& anchor, const TensorT<T>& positive, const TensorT<T>& negatives,
                    double tau) {
    if (tau <= 0.0) throw InvalidTemperature("info_nce: temperature must be > 0");
    if (anchor.rank() != 1 || positive.shape() != anchor.shape())
        throw ShapeMismatch("info_nce: anchor and positive must be matching vectors");
    const std::int64_t p = anchor.dim(0);
    if (negatives.numel() > 0 && (negatives.rank() != 2 || negatives.dim(1) != p))
        throw ShapeMismatch("info_nce: negatives must be [K," + std::to_string(p) + "]");
    const std::int64_t K = negatives.numel() > 0 ? negatives.dim(0) : 0;

    // Forward in double so the closed-form oracle cases hold to 1e-6 and
    // beyond regardless of the storage precision.
    const auto& ad = anchor.data();
    const auto& pd = positive.data();
    const auto& nd = negatives.data();
    auto dot_with_anchor = [&](const T* row) {
        double s = 0.0;
        for (std::int64_t i = 0; i < p; ++i) s += static_cast<double>(ad[static_cast<std::size_t>(i)]) * static_cast<double>(row[i]);
        return s / tau;
    };
    const double s_pos = dot_with_anchor(pd.data());
    std::vector<double> s_neg(static_cast<std::size_t>(K));
    double m = s_pos;
    for (std::int64_t k = 0; k < K; ++k) {
        s_neg[static_cast<std::size_t>(k)] = dot_with_anchor(nd.data() + k * p);
        m = std::max(m, s_neg[static_cast<std::size_t>(k)]);
    }
    double denom = std::exp(s_pos - m);
    for (const double s : s_neg) denom += std::exp(s - m);
    const double loss = m + std::log(denom) - s_pos;

    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(loss));
    if (tracing<T>({&anchor, &positive, &negatives})) {
        // Softmax responsibilities over {positive} U negatives.
        std::vector<double> w(static_cast<std::size_t>(K + 1));
        w[0] = std::exp(s_pos - m) / denom - 1.0;  // d loss / d s_pos
        for (std::int64_t k = 0; k < K; ++k)
            w[static_cast<std::size_t>(k + 1)] = std::exp(s_neg[static_cast<std::size_t>(k)] - m) / denom;

        record(out, [anchor = anchor, positive = positive, negatives = negatives, out,
                     w = std::move(w), tau, p, K]() mutable {
            const double g = static_cast<double>(out.grad()[0]) / tau;
            const auto& ad = anchor.data();
            const auto& pd = positive.data();
            const auto& nd = negatives.data();
            if (anchor.requires_grad()) {
                auto& ga = anchor.grad();
                for (std::int64_t i = 0; i < p; ++i) {
                    double acc = w[0] * static_cast<double>(pd[static_cast<std::size_t>(i)]);
                    for (std::int64_t k = 0; k < K; ++k)
                        acc += w[static_cast<std::size_t>(k + 1)] *
                               static_cast<double>(nd[static_cast<std::size_t>(k * p + i)]);
                    ga[static_cast<std::size_t>(i)] += static_cast<T>(g * acc);
                }
            }
            if (positive.requires_grad()) {
                auto& gp = positive.grad();
                for (std::int64_t i = 0; i < p; ++i)
                    gp[static_cast<std::size_t>(i)] +=
                        static_cast<T>(g * w[0] * static_cast<double>(ad[static_cast<std::size_t>(i)]));
            }
            if (K > 0 && negatives.requires_grad()) {
                auto& gn = negatives.grad();
                for (std::int64_t k = 0; k < K; ++k)
                    for (std::int64_t i = 0; i < p; ++i)
                        gn[static_cast<std::size_t>(k * p + i)] += static_cast<T>(
                            g * w[static_cast<std::size_t>(k + 1)] * static_cast<double>(ad[static_cast<std::size_t>(i)]));
            }
        });
    }
    return out;
}

NegativeSet build_negative_sets(std::int64_t batch_size, std::int64_t num_patches,
                                std::int64_t anchor_image) {
    if (batch_size < 1) throw ConfigError("build_negative_sets: batch_size must be >= 1");
    if (anchor_image < 0 || anchor_image >= batch_size)
        throw ConfigError("build_negative_sets: anchor outside batch");
    NegativeSet set;
    set.anchor_image = anchor_image;
    set.indices.reserve(static_cast<std::size_t>((batch_size - 1) * num_patches));
    for (std::int64_t j = 0; j < batch_size; ++j) {
        if (j == anchor_image) continue;  // never the anchor's own image, any view
        for (std::int64_t i = 0; i < num_patches; ++i) set.indices.push_back(j * num_patches + i);
    }
    return set;
}

namespace {

/// One direction of the dense loss: anchors = globals of `ga` [B,p],
/// positives/negatives = patches of `pb` [B,N,p]. Returns the scalar loss
/// value and fills the per-similarity weight matrix w[b*(B*N) + j*N + i]
/// with d(loss)/d(sim) (already averaged over B*N terms).
template <typename T>
double dense_direction(const TensorT<T>& ga, const TensorT<T>& pb, double tau, std::vector<double>& w) {
    const std::int64_t B = ga.dim(0);
    const std::int64_t N = pb.dim(1);
    const std::int64_t p = ga.dim(1);
    const auto& gad = ga.data();
    const auto& pbd = pb.data();

    std::vector<double> sims(static_cast<std::size_t>(B * B * N));
    for (std::int64_t b = 0; b < B; ++b) {
        const T* arow = gad.data() + b * p;
        for (std::int64_t j = 0; j < B; ++j)
            for (std::int64_t i = 0; i < N; ++i) {
                const T* prow = pbd.data() + (j * N + i) * p;
                double s = 0.0;
                for (std::int64_t c = 0; c < p; ++c)
                    s += static_cast<double>(arow[c]) * static_cast<double>(prow[c]);
                sims[static_cast<std::size_t>((b * B + j) * N + i)] = s / tau;
            }
    }

    w.assign(static_cast<std::size_t>(B * B * N), 0.0);
    const double scale = 1.0 / static_cast<double>(B * N);
    double loss = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const double* srow = sims.data() + b * B * N;
        double m = srow[0];
        for (std::int64_t t = 1; t < B * N; ++t) m = std::max(m, srow[t]);

        double z_neg = 0.0;  // shared negative mass: all patches of other images
        for (std::int64_t j = 0; j < B; ++j) {
            if (j == b) continue;
            for (std::int64_t i = 0; i < N; ++i) z_neg += std::exp(srow[j * N + i] - m);
        }

        double inv_denom_sum = 0.0;
        for (std::int64_t i = 0; i < N; ++i) {
            const double e_pos = std::exp(srow[b * N + i] - m);
            const double denom = e_pos + z_neg;
            loss += (m + std::log(denom) - srow[b * N + i]) * scale;
            inv_denom_sum += 1.0 / denom;
            w[static_cast<std::size_t>((b * B + b) * N + i)] = (e_pos / denom - 1.0) * scale;
        }
        for (std::int64_t j = 0; j < B; ++j) {
            if (j == b) continue;
            for (std::int64_t i = 0; i < N; ++i)
                w[static_cast<std::size_t>((b * B + j) * N + i)] =
                    std::exp(srow[j * N + i] - m) * inv_denom_sum * scale;
        }
    }
    return loss;
}

/// Accumulate gradients of one dense direction given its weight matrix.
template <typename T>
void dense_direction_backward(const TensorT<T>& ga, const TensorT<T>& pb, const std::vector<double>& w,
                              double tau, double upstream) {
    TensorT<T> ga_mut = ga;
    TensorT<T> pb_mut = pb;
    const std::int64_t B = ga.dim(0);
    const std::int64_t N = pb.dim(1);
    const std::int64_t p = ga.dim(1);
    const double g = upstream / tau;
    const auto& gad = ga.data();
    const auto& pbd = pb.data();
    if (ga.requires_grad()) {
        auto& gga = ga_mut.grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t j = 0; j < B; ++j)
                for (std::int64_t i = 0; i < N; ++i) {
                    const double wv = w[static_cast<std::size_t>((b * B + j) * N + i)];
                    if (wv == 0.0) continue;
                    const T* prow = pbd.data() + (j * N + i) * p;
                    for (std::int64_t c = 0; c < p; ++c)
                        gga[static_cast<std::size_t>(b * p + c)] +=
                            static_cast<T>(g * wv * static_cast<double>(prow[c]));
                }
    }
    if (pb.requires_grad()) {
        auto& gpb = pb_mut.grad();
        for (std::int64_t b = 0; b < B; ++b) {
            const T* arow = gad.data() + b * p;
            for (std::int64_t j = 0; j < B; ++j)
                for (std::int64_t i = 0; i < N; ++i) {
                    const double wv = w[static_cast<std::size_t>((b * B + j) * N + i)];
                    if (wv == 0.0) continue;
                    for (std::int64_t c = 0; c < p; ++c)
                        gpb[static_cast<std::size_t>((j * N + i) * p + c)] +=
                            static_cast<T>(g * wv * static_cast<double>(arow[c]));
                }
        }
    }
}

template <typename T>
void check_views(const ProjectedFeaturesT<T>& a, const ProjectedFeaturesT<T>& b) {
    if (a.global.rank() != 2 || b.global.rank() != 2 || a.patches.rank() != 3 || b.patches.rank() != 3)
        throw ShapeMismatch("contrastive: expected global [B,p] and patches [B,N,p]");
    if (a.global.shape() != b.global.shape() || a.patches.shape() != b.patches.shape())
        throw ShapeMismatch("contrastive: view shapes differ: " + shape_str(a.patches.shape()) +
                            " vs " + shape_str(b.patches.shape()));
    if (a.patches.dim(0) != a.global.dim(0) || a.patches.dim(2) != a.global.dim(1))
        throw ShapeMismatch("contrastive: patches " + shape_str(a.patches.shape()) +
                            " inconsistent with global " + shape_str(a.global.shape()));
}

}  // namespace

template <typename T>
TensorT<T> dense_loss(const ProjectedFeaturesT<T>& view_a, const ProjectedFeaturesT<T>& view_b,
                      const ContrastiveConfig& config) {
    config.validate();
    check_views(view_a, view_b);
    const double tau = config.temperature;

    std::vector<double> w_ab;
    double loss = dense_direction(view_a.global, view_b.patches, tau, w_ab);
    std::vector<double> w_ba;
    if (config.symmetric) {
        loss = 0.5 * (loss + dense_direction(view_b.global, view_a.patches, tau, w_ba));
    }

    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(loss));
    const TensorT<T>& ga = view_a.global;
    const TensorT<T>& pa = view_a.patches;
    const TensorT<T>& gb = view_b.global;
    const TensorT<T>& pb = view_b.patches;
    if (tracing<T>({&ga, &pa, &gb, &pb})) {
        const bool symmetric = config.symmetric;
        record(out, [ga, pa, gb, pb, out, w_ab = std::move(w_ab), w_ba = std::move(w_ba), tau,
                     symmetric]() mutable {
            const double upstream = static_cast<double>(out.grad()[0]);
            if (!symmetric) {
                dense_direction_backward(ga, pb, w_ab, tau, upstream);
            } else {
                dense_direction_backward(ga, pb, w_ab, tau, 0.5 * upstream);
                dense_direction_backward(gb, pa, w_ba, tau, 0.5 * upstream);
            }
        });
    }
    return out;
}

namespace {

/// One direction of the global-only loss; w is [B,B] over view-B globals.
template <typename T>
double vanilla_direction(const TensorT<T>& ga, const TensorT<T>& gb, double tau, std::vector<double>& w) {
    const std::int64_t B = ga.dim(0);
    const std::int64_t p = ga.dim(1);
    const auto& gad = ga.data();
    const auto& gbd = gb.data();

    std::vector<double> sims(static_cast<std::size_t>(B * B));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < B; ++j) {
            double s = 0.0;
            for (std::int64_t c = 0; c < p; ++c)
                s += static_cast<double>(gad[static_cast<std::size_t>(b * p + c)]) *
                     static_cast<double>(gbd[static_cast<std::size_t>(j * p + c)]);
            sims[static_cast<std::size_t>(b * B + j)] = s / tau;
        }

    w.assign(static_cast<std::size_t>(B * B), 0.0);
    const double scale = 1.0 / static_cast<double>(B);
    double loss = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const double* srow = sims.data() + b * B;
        double m = srow[0];
        for (std::int64_t j = 1; j < B; ++j) m = std::max(m, srow[j]);
        double denom = 0.0;
        for (std::int64_t j = 0; j < B; ++j) denom += std::exp(srow[j] - m);
        loss += (m + std::log(denom) - srow[b]) * scale;
        for (std::int64_t j = 0; j < B; ++j)
            w[static_cast<std::size_t>(b * B + j)] =
                (std::exp(srow[j] - m) / denom - (j == b ? 1.0 : 0.0)) * scale;
    }
    return loss;
}

template <typename T>
void vanilla_direction_backward(const TensorT<T>& ga, const TensorT<T>& gb, const std::vector<double>& w,
                                double tau, double upstream) {
    TensorT<T> ga_mut = ga;
    TensorT<T> gb_mut = gb;
    const std::int64_t B = ga.dim(0);
    const std::int64_t p = ga.dim(1);
    const double g = upstream / tau;
    const auto& gad = ga.data();
    const auto& gbd = gb.data();
    if (ga.requires_grad()) {
        auto& gga = ga_mut.grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t j = 0; j < B; ++j) {
                const double wv = w[static_cast<std::size_t>(b * B + j)];
                if (wv == 0.0) continue;
                for (std::int64_t c = 0; c < p; ++c)
                    gga[static_cast<std::size_t>(b * p + c)] +=
                        static_cast<T>(g * wv * static_cast<double>(gbd[static_cast<std::size_t>(j * p + c)]));
            }
    }
    if (gb.requires_grad()) {
        auto& ggb = gb_mut.grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t j = 0; j < B; ++j) {
                const double wv = w[static_cast<std::size_t>(b * B + j)];
                if (wv == 0.0) continue;
                for (std::int64_t c = 0; c < p; ++c)
                    ggb[static_cast<std::size_t>(j * p + c)] +=
                        static_cast<T>(g * wv * static_cast<double>(gad[static_cast<std::size_t>(b * p + c)]));
            }
    }
}

}  // namespace

template <typename T>
TensorT<T> vanilla_loss(const ProjectedFeaturesT<T>& view_a, const ProjectedFeaturesT<T>& view_b,
                        const ContrastiveConfig& config) {
    config.validate();
    check_views(view_a, view_b);
    const double tau = config.temperature;

    std::vector<double> w_ab;
    double loss = vanilla_direction(view_a.global, view_b.global, tau, w_ab);
    std::vector<double> w_ba;
    if (config.symmetric) {
        loss = 0.5 * (loss + vanilla_direction(view_b.global, view_a.global, tau, w_ba));
    }

    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(loss));
    const TensorT<T>& ga = view_a.global;
    const TensorT<T>& gb = view_b.global;
    if (tracing<T>({&ga, &gb})) {
        const bool symmetric = config.symmetric;
        record(out, [ga, gb, out, w_ab = std::move(w_ab), w_ba = std::move(w_ba), tau, symmetric]() mutable {
            const double upstream = static_cast<double>(out.grad()[0]);
            if (!symmetric) {
                vanilla_direction_backward(ga, gb, w_ab, tau, upstream);
            } else {
                vanilla_direction_backward(ga, gb, w_ab, tau, 0.5 * upstream);
                vanilla_direction_backward(gb, ga, w_ba, tau, 0.5 * upstream);
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> contrastive_loss(const ProjectedFeaturesT<T>& view_a, const ProjectedFeaturesT<T>& view_b,
                            const ContrastiveConfig& config) {
    return config.mode == ContrastiveConfig::Mode::dense ? dense_loss(view_a, view_b, config)
                                                         : vanilla_loss(view_a, view_b, config);
}

#define DVIT_INSTANTIATE_CONTRASTIVE(T)                                                                \
    template struct ProjectionHeadT<T>;                                                                \
    template ProjectedFeaturesT<T> project<T>(const TensorT<T>&, const ProjectionHeadT<T>&, bool);     \
    template TensorT<T> info_nce<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, double);  \
    template TensorT<T> dense_loss<T>(const ProjectedFeaturesT<T>&, const ProjectedFeaturesT<T>&,      \
                                      const ContrastiveConfig&);                                       \
    template TensorT<T> vanilla_loss<T>(const ProjectedFeaturesT<T>&, const ProjectedFeaturesT<T>&,    \
                                        const ContrastiveConfig&);                                     \
    template TensorT<T> contrastive_loss<T>(const ProjectedFeaturesT<T>&, const ProjectedFeaturesT<T>&,\
                                            const ContrastiveConfig&);

DVIT_INSTANTIATE_CONTRASTIVE(float)
DVIT_INSTANTIATE_CONTRASTIVE(double)

#undef DVIT_INSTANTIATE_CONTRASTIVE

}  // namespace dvit
