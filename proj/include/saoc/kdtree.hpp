#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "saoc/errors.hpp"
#include "saoc/geometry.hpp"

namespace saoc {

// Static 3-d tree over a point set; exact nearest-neighbor queries.
class KdTree3 {
public:
    explicit KdTree3(std::vector<Vec3> points) : pts_(std::move(points)) {
        if (pts_.empty()) throw ContractError("kdtree: empty point set");
        index_.resize(pts_.size());
        for (size_t i = 0; i < pts_.size(); ++i) index_[i] = static_cast<int64_t>(i);
        nodes_.reserve(pts_.size());
        root_ = build(0, static_cast<int64_t>(pts_.size()), 0);
    }

    struct Hit {
        int64_t index = -1;
        double distance = std::numeric_limits<double>::infinity();
    };

    Hit nearest(const Vec3& q) const {
        Hit best;
        search(root_, q, best);
        best.distance = std::sqrt(best.distance);
        return best;
    }

    const Vec3& point(int64_t i) const { return pts_[static_cast<size_t>(i)]; }
    size_t size() const { return pts_.size(); }

private:
    struct Node {
        int64_t point = -1;
        int32_t axis = 0;
        int32_t left = -1, right = -1;
    };

    int32_t build(int64_t lo, int64_t hi, int depth) {
        if (lo >= hi) return -1;
        const int axis = depth % 3;
        const int64_t mid = lo + (hi - lo) / 2;
        std::nth_element(index_.begin() + lo, index_.begin() + mid, index_.begin() + hi,
                         [&](int64_t a, int64_t b) {
                             return pts_[static_cast<size_t>(a)][axis] <
                                    pts_[static_cast<size_t>(b)][axis];
                         });
        const int32_t id = static_cast<int32_t>(nodes_.size());
        nodes_.push_back(Node{index_[static_cast<size_t>(mid)], static_cast<int32_t>(axis), -1, -1});
        const int32_t l = build(lo, mid, depth + 1);
        const int32_t r = build(mid + 1, hi, depth + 1);
        nodes_[static_cast<size_t>(id)].left = l;
        nodes_[static_cast<size_t>(id)].right = r;
        return id;
    }

    void search(int32_t id, const Vec3& q, Hit& best) const {
        if (id < 0) return;
        const Node& n = nodes_[static_cast<size_t>(id)];
        const Vec3& p = pts_[static_cast<size_t>(n.point)];
        const Vec3 d = q - p;
        const double d2 = d.dot(d);
        if (d2 < best.distance) {
            best.distance = d2;
            best.index = n.point;
        }
        const double delta = q[n.axis] - p[n.axis];
        const int32_t near = delta < 0.0 ? n.left : n.right;
        const int32_t far = delta < 0.0 ? n.right : n.left;
        search(near, q, best);
        if (delta * delta < best.distance) search(far, q, best);
    }

    std::vector<Vec3> pts_;
    std::vector<int64_t> index_;
    std::vector<Node> nodes_;
    int32_t root_ = -1;
};

}  // namespace saoc
