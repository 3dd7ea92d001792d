// metrics.cpp

#include "tracer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <queue>

namespace tracer {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<uint8_t> binarize_mask(const Mask &m) {
    std::vector<uint8_t> b(static_cast<size_t>(m.extents.voxels()));
    for (size_t i = 0; i < b.size(); ++i) b[i] = m.voxels[i] >= 0.5f ? 1 : 0;
    return b;
}

int64_t count(const std::vector<uint8_t> &b) { return std::count(b.begin(), b.end(), uint8_t{1}); }

void require_single_channel(const Volume &v, const char *what) {
    if (v.channels != 1) throw dimension_error(std::string(what) + ": expected a single-channel volume");
}

// 1D squared distance transform of sampled function f at positions i * step.
void edt_1d(const double *f, double *out, int64_t n, int64_t stride, double step, std::vector<int64_t> &v,
            std::vector<double> &z, std::vector<double> &buf) {
    buf.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) buf[i] = f[i * stride];
    v.resize(static_cast<size_t>(n));
    z.resize(static_cast<size_t>(n + 1));
    int64_t k = -1;
    auto inter = [&](int64_t q, int64_t p) {
        const double xq = q * step, xp = p * step;
        return ((buf[q] + xq * xq) - (buf[p] + xp * xp)) / (2.0 * (xq - xp));
    };
    for (int64_t q = 0; q < n; ++q) {
        if (!std::isfinite(buf[q])) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        double s = inter(q, v[k]);
        // z[0] is -inf, so k never drops below zero here.
        while (s <= z[k]) s = inter(q, v[--k]);
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    if (k < 0) {
        for (int64_t i = 0; i < n; ++i) out[i * stride] = kInf;
        return;
    }
    int64_t j = 0;
    for (int64_t q = 0; q < n; ++q) {
        const double x = q * step;
        while (z[j + 1] < x) ++j;
        const double dx = x - v[j] * step;
        out[q * stride] = dx * dx + buf[v[j]];
    }
}

size_t flat(Extents e, int64_t z, int64_t y, int64_t x) { return static_cast<size_t>((z * e.h + y) * e.w + x); }

std::vector<Point3> to_points(const std::vector<int64_t> &idx, Extents e, Spacing s) {
    std::vector<Point3> out;
    for (int64_t i : idx) {
        const int64_t x = i % e.w, y = (i / e.w) % e.h, z = i / (e.w * e.h);
        out.push_back({z * s.d, y * s.h, x * s.w});
    }
    return out;
}

double dist(const Point3 &a, const Point3 &b) {
    return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

struct Neighbour {
    int dz, dy, dx;
    double length;
};

std::vector<Neighbour> neighbours26(Spacing s) {
    std::vector<Neighbour> n;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (!dz && !dy && !dx) continue;
                n.push_back({dz, dy, dx, std::sqrt(dz * dz * s.d * s.d + dy * dy * s.h * s.h + dx * dx * s.w * s.w)});
            }
    return n;
}

// Dijkstra restricted to the mask; cost(v) is the price of entering voxel v per unit length.
std::vector<double> dijkstra(const std::vector<uint8_t> &mask, Extents e, Spacing s, int64_t source,
                             const std::vector<double> *cost, std::vector<int64_t> *parent) {
    std::vector<double> d(mask.size(), kInf);
    if (parent) parent->assign(mask.size(), -1);
    using Item = std::pair<double, int64_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    d[source] = 0;
    pq.push({0.0, source});
    const auto nb = neighbours26(s);
    while (!pq.empty()) {
        const auto [du, u] = pq.top();
        pq.pop();
        if (du > d[u]) continue;
        const int64_t x = u % e.w, y = (u / e.w) % e.h, z = u / (e.w * e.h);
        for (const auto &n : nb) {
            const int64_t zz = z + n.dz, yy = y + n.dy, xx = x + n.dx;
            if (zz < 0 || yy < 0 || xx < 0 || zz >= e.d || yy >= e.h || xx >= e.w) continue;
            const auto v = static_cast<int64_t>(flat(e, zz, yy, xx));
            if (!mask[v]) continue;
            const double nd = du + n.length * (cost ? (*cost)[v] : 1.0);
            if (nd < d[v]) {
                d[v] = nd;
                if (parent) (*parent)[v] = u;
                pq.push({nd, v});
            }
        }
    }
    return d;
}

int64_t farthest_reachable(const std::vector<double> &d) {
    int64_t best = -1;
    for (size_t i = 0; i < d.size(); ++i)
        if (std::isfinite(d[i]) && (best < 0 || d[i] > d[best])) best = static_cast<int64_t>(i);
    return best;
}

std::string fmt(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

} // namespace

double dsc(const Mask &a, const Mask &b) {
    require_same_extents(a.extents, b.extents, "dsc");
    const auto ba = binarize_mask(a), bb = binarize_mask(b);
    int64_t na = 0, nb = 0, both = 0;
    for (size_t i = 0; i < ba.size(); ++i) {
        na += ba[i];
        nb += bb[i];
        both += ba[i] & bb[i];
    }
    if (na + nb == 0) throw metric_error("dsc undefined: both masks are empty");
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

std::vector<int64_t> surface_voxels(const Mask &m) {
    require_single_channel(m, "surface_voxels");
    const Extents e = m.extents;
    const auto b = binarize_mask(m);
    std::vector<int64_t> out;
    for (int64_t z = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x) {
                const size_t i = flat(e, z, y, x);
                if (!b[i]) continue;
                const bool edge = z == 0 || y == 0 || x == 0 || z == e.d - 1 || y == e.h - 1 || x == e.w - 1;
                if (edge || !b[flat(e, z - 1, y, x)] || !b[flat(e, z + 1, y, x)] || !b[flat(e, z, y - 1, x)] ||
                    !b[flat(e, z, y + 1, x)] || !b[flat(e, z, y, x - 1)] || !b[flat(e, z, y, x + 1)])
                    out.push_back(static_cast<int64_t>(i));
            }
    return out;
}

std::vector<double> squared_distance_transform(const std::vector<uint8_t> &feature, Extents e, Spacing s) {
    if (feature.size() != static_cast<size_t>(e.voxels()))
        throw dimension_error("squared_distance_transform: feature size does not match extents");
    std::vector<double> g(feature.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = feature[i] ? 0.0 : kInf;
    std::vector<int64_t> v;
    std::vector<double> z, buf;
    // w axis
    for (int64_t a = 0; a < e.d * e.h; ++a) edt_1d(&g[a * e.w], &g[a * e.w], e.w, 1, s.w, v, z, buf);
    // h axis
    for (int64_t d = 0; d < e.d; ++d)
        for (int64_t x = 0; x < e.w; ++x) {
            double *p = &g[flat(e, d, 0, x)];
            edt_1d(p, p, e.h, e.w, s.h, v, z, buf);
        }
    // d axis
    for (int64_t y = 0; y < e.h; ++y)
        for (int64_t x = 0; x < e.w; ++x) {
            double *p = &g[flat(e, 0, y, x)];
            edt_1d(p, p, e.d, e.h * e.w, s.d, v, z, buf);
        }
    return g;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw metric_error("percentile of an empty set");
    if (q < 0 || q > 100) throw std::invalid_argument("percentile: q must be in [0, 100]");
    std::sort(values.begin(), values.end());
    const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

double hd95(const Mask &a, const Mask &b, Spacing s) {
    require_same_extents(a.extents, b.extents, "hd95");
    const auto sa = surface_voxels(a), sb = surface_voxels(b);
    if (sa.empty() || sb.empty()) throw metric_error("hd95 undefined: a mask is empty");
    const Extents e = a.extents;
    auto distances_to = [&](const std::vector<int64_t> &from, const std::vector<int64_t> &to, std::vector<double> &out) {
        std::vector<uint8_t> feat(static_cast<size_t>(e.voxels()), 0);
        for (int64_t i : to) feat[i] = 1;
        const auto d2 = squared_distance_transform(feat, e, s);
        for (int64_t i : from) out.push_back(std::sqrt(d2[i]));
    };
    std::vector<double> pooled;
    distances_to(sa, sb, pooled);
    distances_to(sb, sa, pooled);
    return percentile(std::move(pooled), 95.0);
}

std::vector<Point3> centerline(const Mask &m, Spacing s) {
    require_single_channel(m, "centerline");
    const Extents e = m.extents;
    const auto mask = binarize_mask(m);
    if (count(mask) < 3) throw metric_error("centerline: mask has fewer than 3 voxels");

    // Distance to background, with the grid exterior counted as background.
    const Extents pe{e.d + 2, e.h + 2, e.w + 2};
    std::vector<uint8_t> background(static_cast<size_t>(pe.voxels()), 1);
    for (int64_t z = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x)
                background[flat(pe, z + 1, y + 1, x + 1)] = mask[flat(e, z, y, x)] ? 0 : 1;
    const auto pd2 = squared_distance_transform(background, pe, s);
    std::vector<double> cost(mask.size(), kInf);
    int64_t deepest = -1;
    double deepest_d2 = -1;
    for (int64_t z = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x) {
                const size_t i = flat(e, z, y, x);
                if (!mask[i]) continue;
                const double d2 = pd2[flat(pe, z + 1, y + 1, x + 1)];
                cost[i] = 1.0 / d2;
                if (d2 > deepest_d2) {
                    deepest_d2 = d2;
                    deepest = static_cast<int64_t>(i);
                }
            }

    const int64_t end_a = farthest_reachable(dijkstra(mask, e, s, deepest, nullptr, nullptr));
    const int64_t end_b = farthest_reachable(dijkstra(mask, e, s, end_a, nullptr, nullptr));
    std::vector<int64_t> parent;
    dijkstra(mask, e, s, end_a, &cost, &parent);
    std::vector<int64_t> path;
    for (int64_t v = end_b; v >= 0; v = parent[v]) path.push_back(v);
    if (path.size() < 3) throw metric_error("centerline has fewer than 3 points");
    return to_points(path, e, s);
}

double mcd_points(const std::vector<Point3> &a, const std::vector<Point3> &b) {
    if (a.empty() || b.empty()) throw metric_error("mcd: empty centerline");
    auto directed = [](const std::vector<Point3> &from, const std::vector<Point3> &to) {
        std::vector<double> d;
        d.reserve(from.size());
        for (const auto &p : from) {
            double best = kInf;
            for (const auto &q : to) best = std::min(best, dist(p, q));
            d.push_back(best);
        }
        return percentile(std::move(d), 50.0);
    };
    return 0.5 * (directed(a, b) + directed(b, a));
}

double mcd(const Mask &a, const Mask &b, Spacing s) {
    require_same_extents(a.extents, b.extents, "mcd");
    return mcd_points(centerline(a, s), centerline(b, s));
}

double delta_T(const Mask &y_m, const Mask &y_def) {
    require_same_extents(y_m.extents, y_def.extents, "delta_T");
    const int64_t vm = count_foreground(y_m);
    if (vm == 0) throw metric_error("delta_T undefined: the moving tumour mask is empty");
    const int64_t vd = count_foreground(y_def);
    return std::abs(static_cast<double>(vd - vm)) / static_cast<double>(vm) * 100.0;
}

double m_lexs(const Volume &jac, const Mask &y_m) {
    require_same_extents(jac.extents, y_m.extents, "m_lexs");
    require_single_channel(jac, "m_lexs");
    const auto b = binarize_mask(y_m);
    double sum = 0;
    int64_t n = 0;
    for (size_t i = 0; i < b.size(); ++i) {
        if (!b[i]) continue;
        sum += std::abs(static_cast<double>(jac.voxels[i]) - 1.0);
        ++n;
    }
    if (n == 0) throw metric_error("m_lexs undefined: the tumour mask is empty");
    return sum / static_cast<double>(n) * 100.0;
}

double tumor_mse(const Volume &moving, const Mask &y_m, const Volume &deformed, const Mask &y_def) {
    const Extents e = moving.extents;
    require_same_extents(e, y_m.extents, "tumor_mse");
    require_same_extents(e, deformed.extents, "tumor_mse");
    require_same_extents(e, y_def.extents, "tumor_mse");
    const auto bm = binarize_mask(y_m), bd = binarize_mask(y_def);
    // A vanished deformed tumour is a valid (bad) outcome; only the reference must exist.
    if (count(bm) == 0) throw metric_error("tumor_mse undefined: the moving tumour mask is empty");
    double sum = 0;
    int64_t n = 0;
    for (size_t i = 0; i < bm.size(); ++i) {
        if (!bm[i] && !bd[i]) continue;
        const double r = bm[i] * static_cast<double>(moving.voxels[i]) - bd[i] * static_cast<double>(deformed.voxels[i]);
        sum += r * r;
        ++n;
    }
    return sum / static_cast<double>(n);
}

double delta_ptd(const Volume &dose, const Mask &y_m, const Volume &dose_def, const Mask &y_def, DoseSummary summary) {
    require_same_extents(dose.extents, y_m.extents, "delta_ptd");
    require_same_extents(dose_def.extents, y_def.extents, "delta_ptd");
    auto stat = [&](const Volume &d, const Mask &m) {
        const auto b = binarize_mask(m);
        double acc = summary == DoseSummary::min ? kInf : (summary == DoseSummary::max ? -kInf : 0.0);
        int64_t n = 0;
        for (size_t i = 0; i < b.size(); ++i) {
            if (!b[i]) continue;
            const double v = d.voxels[i];
            if (summary == DoseSummary::mean) acc += v;
            else if (summary == DoseSummary::min) acc = std::min(acc, v);
            else acc = std::max(acc, v);
            ++n;
        }
        if (n == 0) throw metric_error("delta_ptd undefined: a tumour mask is empty");
        return summary == DoseSummary::mean ? acc / static_cast<double>(n) : acc;
    };
    return std::abs(stat(dose, y_m) - stat(dose_def, y_def));
}

double delta_ptd(const Volume &dose, const Mask &y_m, const Mask &y_def, DoseSummary summary) {
    return delta_ptd(dose, y_m, dose, y_def, summary);
}

MetricsReport::MetricsReport() : delta_T_percent(kNaN), m_lexs_percent(kNaN), tumor_mse(kNaN), delta_ptd(kNaN) {}

VbaDecision vba_filter(const MetricsReport &report, double threshold) {
    VbaDecision out;
    for (const auto *lung : {&structures::left_lung, &structures::right_lung}) {
        const auto it = report.dsc.find(*lung);
        if (it == report.dsc.end() || !std::isfinite(it->second))
            throw metric_error("vba_filter: missing DSC for " + *lung);
        if (it->second < threshold) {
            out.excluded = true;
            std::string name = *lung;
            std::replace(name.begin(), name.end(), '_', ' ');
            out.reason += (out.reason.empty() ? "" : ", ") + name;
        }
    }
    return out;
}

std::vector<std::string> report_columns() {
    std::vector<std::string> c{"format_version", "pair"};
    for (const auto &s : structures::organs()) c.push_back("dsc_" + s);
    for (const auto &s : structures::organs()) c.push_back("hd95_" + s);
    for (const auto &s : structures::tubes()) c.push_back("mcd_" + s);
    for (const char *n : {"delta_T_percent", "m_lexs_percent", "tumor_mse", "delta_ptd", "excluded", "exclusion_reason"})
        c.push_back(n);
    return c;
}

void write_report_csv(std::ostream &os, const std::vector<MetricsReport> &reports) {
    const auto cols = report_columns();
    for (size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
    os << '\n';
    auto lookup = [](const std::map<std::string, double> &m, const std::string &k) {
        const auto it = m.find(k);
        return it == m.end() ? kNaN : it->second;
    };
    for (const auto &r : reports) {
        os << kReportFormatVersion << ',' << r.pair;
        for (const auto &s : structures::organs()) os << ',' << fmt(lookup(r.dsc, s));
        for (const auto &s : structures::organs()) os << ',' << fmt(lookup(r.hd95, s));
        for (const auto &s : structures::tubes()) os << ',' << fmt(lookup(r.mcd, s));
        os << ',' << fmt(r.delta_T_percent) << ',' << fmt(r.m_lexs_percent) << ',' << fmt(r.tumor_mse) << ','
           << fmt(r.delta_ptd) << ',' << (r.excluded ? 1 : 0) << ',' << '"' << r.exclusion_reason << '"' << '\n';
    }
}

} // namespace tracer
