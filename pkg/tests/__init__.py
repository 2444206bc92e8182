# flatlat tests
