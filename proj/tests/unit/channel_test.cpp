#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "flowsim/channel.hpp"
#include "flowsim/error.hpp"
#include "flowsim/rng.hpp"

namespace flowsim {
namespace {

using channel::ChannelParams;
using channel::LinkBudget;
using channel::Reason;

constexpr double kC = 299792458.0;

double closed_form_rx_dbm(double d_m) {
    return -20.0 - 20.0 * std::log10(4.0 * std::numbers::pi * d_m * 1e12 / kC) - 1.5 * d_m * 1000.0;
}

TEST(Channel, SpreadingLossAtOneCentimetre) {
    const auto b = channel::path_loss_db(0.01, ChannelParams{});
    EXPECT_NEAR(b.spreading_loss_db, 20.0 * std::log10(4.0 * std::numbers::pi * 0.01 * 1e12 / kC), 1e-12);
    EXPECT_NEAR(b.spreading_loss_db, 52.44, 0.01);
    EXPECT_NEAR(b.medium_loss_db, 15.0, 1e-12);
    EXPECT_NEAR(b.received_power_dbm, -87.44, 0.01);
    EXPECT_DOUBLE_EQ(b.received_power_dbm, -20.0 - b.spreading_loss_db - b.medium_loss_db);
}

TEST(Channel, DoublingDistanceAddsSixDecibels) {
    const ChannelParams p;
    for (double d : {0.001, 0.0123, 0.05}) {
        EXPECT_NEAR(channel::path_loss_db(2 * d, p).spreading_loss_db - channel::path_loss_db(d, p).spreading_loss_db,
                    20.0 * std::log10(2.0), 1e-9);
    }
}

TEST(Channel, NonPositiveDistanceRejected) {
    EXPECT_THROW(channel::path_loss_db(0.0, ChannelParams{}), ConfigError);
    EXPECT_THROW(channel::path_loss_db(-1.0, ChannelParams{}), ConfigError);
}

TEST(Channel, LayeredMedium) {
    ChannelParams p;
    p.layers = {{"skin", 2.0, 1.0}, {"tissue", 1.0, 5.0}, {"vessel", 3.0, 2.0}};
    EXPECT_NEAR(channel::path_loss_db(0.0005, p).medium_loss_db, 1.0, 1e-12);
    EXPECT_NEAR(channel::path_loss_db(0.004, p).medium_loss_db, 2.0 + 3.0, 1e-12);
    EXPECT_NEAR(channel::path_loss_db(0.008, p).medium_loss_db, 2.0 + 5.0 + 6.0, 1e-12);
    // Beyond the listed layers the last one continues.
    EXPECT_NEAR(channel::path_loss_db(0.010, p).medium_loss_db, 2.0 + 5.0 + 6.0 + 6.0, 1e-12);
}

TEST(Channel, Doppler) {
    const ChannelParams p;
    EXPECT_NEAR(channel::doppler_shift_hz(0.2, p), 1e12 * 0.2 / kC, 1e-9);
    EXPECT_NEAR(channel::doppler_shift_hz(0.2, p), 666.7, 1.0);
    EXPECT_EQ(channel::doppler_shift_hz(0.0, p), 0.0);
    EXPECT_EQ(channel::doppler_shift_hz(-0.13, p), -channel::doppler_shift_hz(0.13, p));
}

TEST(Channel, AcceptsStrongCandidate) {
    ChannelParams p;
    p.noise_floor_dbm = -110.0;
    LinkBudget c;
    c.received_power_dbm = -87.44;
    const auto d = channel::receive_decision(c, {}, p);
    EXPECT_TRUE(d.accepted);
    EXPECT_EQ(d.reason, Reason::accepted);
    EXPECT_NEAR(d.sinr_db, -87.44 + 110.0, 1e-9);
    EXPECT_NEAR(d.sinr_db, 22.56, 1e-9);
}

TEST(Channel, NoiseFloorMatchesSensitivityEdge) {
    const ChannelParams p;
    EXPECT_EQ(p.noise_floor_dbm + p.sinr_threshold_db, p.sensitivity_dbm);
    LinkBudget edge;
    edge.received_power_dbm = p.sensitivity_dbm;
    EXPECT_TRUE(channel::receive_decision(edge, {}, p).accepted);
}

TEST(Channel, EqualPowerRespondersBothCollide) {
    const ChannelParams p;
    LinkBudget a, b;
    a.received_power_dbm = -85.0;
    b.received_power_dbm = -85.0;
    const auto da = channel::receive_decision(a, std::vector<LinkBudget>{b}, p);
    const auto db = channel::receive_decision(b, std::vector<LinkBudget>{a}, p);
    EXPECT_FALSE(da.accepted);
    EXPECT_FALSE(db.accepted);
    EXPECT_EQ(da.reason, Reason::collision);
    EXPECT_EQ(db.reason, Reason::collision);
    const double sinr = 10.0 * std::log10(std::pow(10.0, -8.5) / (std::pow(10.0, -12.0) + std::pow(10.0, -8.5)));
    EXPECT_NEAR(da.sinr_db, sinr, 1e-9);
    EXPECT_NEAR(da.sinr_db, 0.0, 0.02);
}

TEST(Channel, BelowSensitivity) {
    LinkBudget c;
    c.received_power_dbm = -120.0;
    const auto d = channel::receive_decision(c, {}, ChannelParams{});
    EXPECT_FALSE(d.accepted);
    EXPECT_EQ(d.reason, Reason::below_sensitivity);
}

TEST(Channel, DopplerBeyondHalfBandwidthRejected) {
    LinkBudget c;
    c.received_power_dbm = -60.0;
    c.doppler_shift_hz = 5.1e9;
    EXPECT_EQ(channel::receive_decision(c, {}, ChannelParams{}).reason, Reason::doppler);
    c.doppler_shift_hz = 667.0;
    EXPECT_TRUE(channel::receive_decision(c, {}, ChannelParams{}).accepted);
}

double bisect_range_m() {
    double lo = 1e-6, hi = 1.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (closed_form_rx_dbm(mid) >= -110.0 ? lo : hi) = mid;
    }
    return lo;
}

TEST(Channel, CommunicationRange) {
    const double oracle = bisect_range_m();
    const double range = channel::communication_range_m(ChannelParams{});
    EXPECT_NEAR(range * 1000.0, 20.8, 0.1);
    EXPECT_NEAR(range, oracle, 1e-9);

    const ChannelParams p;
    LinkBudget inside = channel::path_loss_db(range - 0.001, p);
    LinkBudget outside = channel::path_loss_db(range + 0.001, p);
    EXPECT_TRUE(channel::receive_decision(inside, {}, p).accepted);
    EXPECT_FALSE(channel::receive_decision(outside, {}, p).accepted);
}

TEST(Channel, DecisionAgreesWithClosedFormOnRandomDistances) {
    const ChannelParams p;
    RandomStream rng(2024);
    const double noise_mw = std::pow(10.0, -12.0);
    for (int i = 0; i < 1000; ++i) {
        const double d = rng.uniform(0.0005, 0.04);
        const double rx = closed_form_rx_dbm(d);
        const double sinr = rx - 10.0 * std::log10(noise_mw);
        const bool expected = rx >= -110.0 && sinr >= 10.0;
        const auto got = channel::receive_decision(channel::path_loss_db(d, p), {}, p);
        EXPECT_EQ(got.accepted, expected) << "d=" << d;
        EXPECT_NEAR(channel::path_loss_db(d, p).received_power_dbm, rx, 1e-9);
    }
}

TEST(Channel, ReceivedPowerDecreasesWithDistance) {
    const ChannelParams p;
    double prev = channel::path_loss_db(1e-5, p).received_power_dbm;
    for (double d = 2e-5; d < 0.1; d *= 1.1) {
        const double now = channel::path_loss_db(d, p).received_power_dbm;
        EXPECT_LT(now, prev);
        prev = now;
    }
}

TEST(Channel, AddingInterferersLowersSinr) {
    const ChannelParams p;
    LinkBudget c;
    c.received_power_dbm = -70.0;
    std::vector<LinkBudget> interferers;
    double prev = channel::receive_decision(c, interferers, p).sinr_db;
    for (double power : {-100.0, -95.0, -90.0, -88.0}) {
        LinkBudget i;
        i.received_power_dbm = power;
        interferers.push_back(i);
        const double now = channel::receive_decision(c, interferers, p).sinr_db;
        EXPECT_LT(now, prev);
        prev = now;
    }
}

TEST(Channel, ParamsValidation) {
    EXPECT_NO_THROW(ChannelParams{}.validate());
    ChannelParams p;
    p.attenuation_db_per_mm = 0.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = ChannelParams{};
    p.sensitivity_dbm = -10.0;
    EXPECT_THROW(p.validate(), ConfigError);
}

}  // namespace
}  // namespace flowsim
